"""Grouped vector quantization of token embeddings.

A codebook holds G per-group centroid tables of K entries each; a token is
encoded as G nearest-centroid indices (G * ceil(log2 K) bits).  Codebooks are
initialized by k-means, refined by EMA updates only (never by gradient), and
carry residual statistics for noise-augmented reconstruction during training.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import IndexCorruptionError, ModeError, ShapeError
from .tensor import Tensor, mul, scale, stop_gradient, sub, tsum

MAGIC = b"AVQ1"


def index_bits(codebook_size: int) -> int:
    """Bits to name one centroid: ceil(log2 K); 0 for K=1."""
    if codebook_size < 1:
        raise ValueError("codebook size must be >= 1")
    return max(0, math.ceil(math.log2(codebook_size)))


@dataclass
class Codebook:
    """Per-layer grouped codebook with EMA accumulators.

    ``centroids[g]`` is [K, D/G] in model precision; EMA state is float64.
    """

    layer_id: int
    groups: int
    centroids: list[np.ndarray]
    ema_counts: np.ndarray = None
    ema_sums: list[np.ndarray] = None
    decay: float = 0.99
    smoothing: float = 1e-5

    def __post_init__(self):
        if self.groups < 1 or len(self.centroids) != self.groups:
            raise ShapeError("codebook needs one centroid table per group")
        k, gd = self.centroids[0].shape
        for c in self.centroids:
            if c.ndim != 2 or c.shape != (k, gd):
                raise ShapeError("all groups must share a [K, D/G] shape")
        if not (0.0 < self.decay < 1.0):
            raise ValueError("EMA decay must lie strictly inside (0, 1)")
        if self.smoothing <= 0.0:
            raise ValueError("Laplace smoothing must be positive")
        if self.ema_counts is None:
            self.ema_counts = np.zeros((self.groups, k), dtype=np.float64)
        if self.ema_sums is None:
            self.ema_sums = [np.zeros((k, gd), dtype=np.float64) for _ in range(self.groups)]

    @property
    def size(self) -> int:
        return self.centroids[0].shape[0]

    @property
    def group_dim(self) -> int:
        return self.centroids[0].shape[1]

    @property
    def dim(self) -> int:
        return self.groups * self.group_dim

    @property
    def bits_per_token(self) -> int:
        return self.groups * index_bits(self.size)


@dataclass(frozen=True)
class QuantizedTokens:
    """Indices for a batch of tokens under one codebook."""

    layer_id: int
    token_count: int
    indices: np.ndarray  # [T, G] int32
    bits_per_token: int

    def __post_init__(self):
        if self.indices.shape[0] != self.token_count:
            raise ShapeError("token_count does not match index rows")

    @property
    def payload_bits(self) -> int:
        return self.token_count * self.bits_per_token


@dataclass(frozen=True)
class ResidualStats:
    """First and second central moments of quantization residuals X - X_hat."""

    layer_id: int
    mean: np.ndarray          # [D]
    mode: str                 # "isotropic" | "diagonal"
    variance: np.ndarray      # scalar array () for isotropic, [D] for diagonal
    sample_count: int

    def per_dim_std(self) -> np.ndarray:
        if self.mode == "isotropic":
            return np.full(self.mean.shape, math.sqrt(float(self.variance)))
        return np.sqrt(self.variance)


@dataclass(frozen=True)
class NoiseConfig:
    """Noise-augmented reconstruction: X_tilde = X_hat + lam * xi, xi ~ N(mean, cov)."""

    lam: float
    enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError("noise scale lam must lie in [0, 1]")


def _nearest(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid per point; ties break to the lowest index."""
    p = points.astype(np.float64, copy=False)
    c = centroids.astype(np.float64, copy=False)
    d2 = (p * p).sum(axis=1, keepdims=True) - 2.0 * (p @ c.T) + (c * c).sum(axis=1)[None, :]
    return np.argmin(d2, axis=1)


def _lloyd(points: np.ndarray, k: int, iterations: int, gen: np.random.Generator):
    """Lloyd's algorithm with farthest-point reseeding of empty clusters.

    Returns (centroids, assignment, distortion history); the history is the
    mean squared distance measured at each assignment step, non-increasing.
    """
    m = points.shape[0]
    pts = points.astype(np.float64, copy=False)
    centroids = pts[gen.choice(m, size=k, replace=False)].copy()
    history = []
    assign = None
    for _ in range(max(1, iterations)):
        assign = _nearest(pts, centroids)
        dist2 = ((pts - centroids[assign]) ** 2).sum(axis=1)
        reseeded = False
        for idx in range(k):
            if not (assign == idx).any():
                far = int(np.argmax(dist2))
                centroids[idx] = pts[far]
                assign[far] = idx
                dist2[far] = 0.0
                reseeded = True
        history.append(float(dist2.mean()))
        new_centroids = centroids.copy()
        for idx in range(k):
            sel = assign == idx
            if sel.any():
                new_centroids[idx] = pts[sel].mean(axis=0)
        if not reseeded and np.array_equal(new_centroids, centroids):
            break
        centroids = new_centroids
    assign = _nearest(pts, centroids)
    return centroids, assign, history


def kmeans_init(embeddings: np.ndarray, codebook_size: int, groups: int,
                iterations: int = 25, seed: int = 0, layer_id: int = 0,
                decay: float = 0.99, smoothing: float = 1e-5):
    """Build a codebook from sample embeddings; seeds EMA state from the final
    assignment.  Returns (codebook, distortion_history) where the history is
    the full-width distortion per iteration (sum over groups)."""
    x = np.asarray(embeddings)
    if x.ndim != 2:
        raise ShapeError("kmeans_init expects [M, D] embeddings")
    m, d = x.shape
    if m < codebook_size:
        raise ValueError(f"need at least K={codebook_size} samples, got {m}")
    if d % groups != 0:
        raise ShapeError(f"width {d} is not divisible by {groups} groups")
    gd = d // groups
    dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float32
    centroids, counts, sums = [], [], []
    histories = []
    for g in range(groups):
        gen = rng.generator(seed, "kmeans", layer_id, g)
        pts = x[:, g * gd:(g + 1) * gd]
        c, assign, hist = _lloyd(pts, codebook_size, iterations, gen)
        histories.append(hist)
        hist_counts = np.bincount(assign, minlength=codebook_size).astype(np.float64)
        gsums = np.zeros((codebook_size, gd), dtype=np.float64)
        np.add.at(gsums, assign, pts.astype(np.float64, copy=False))
        centroids.append(c.astype(dtype))
        counts.append(hist_counts)
        sums.append(gsums)
    width = max(len(h) for h in histories)
    padded = [h + [h[-1]] * (width - len(h)) for h in histories]
    history = [float(sum(col)) for col in zip(*padded)]
    cb = Codebook(layer_id=layer_id, groups=groups, centroids=centroids,
                  ema_counts=np.stack(counts), ema_sums=sums,
                  decay=decay, smoothing=smoothing)
    return cb, history


def quantize(codebook: Codebook, x: np.ndarray):
    """Encode tokens to per-group nearest-centroid indices.

    Returns (QuantizedTokens, x_hat); x_hat is bitwise identical to
    dequantize(codebook, indices).
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != codebook.dim:
        raise ShapeError(f"quantize expects [T, {codebook.dim}], got {x.shape}")
    gd = codebook.group_dim
    idx = np.empty((x.shape[0], codebook.groups), dtype=np.int32)
    for g in range(codebook.groups):
        idx[:, g] = _nearest(x[:, g * gd:(g + 1) * gd], codebook.centroids[g])
    q = QuantizedTokens(layer_id=codebook.layer_id, token_count=x.shape[0],
                        indices=idx, bits_per_token=codebook.bits_per_token)
    return q, dequantize(codebook, q)


def dequantize(codebook: Codebook, q: QuantizedTokens) -> np.ndarray:
    """Reconstruct embeddings by centroid lookup, groups concatenated in order."""
    if q.indices.shape[1] != codebook.groups:
        raise ShapeError("index width does not match the codebook's groups")
    if q.indices.min(initial=0) < 0 or q.indices.max(initial=0) >= codebook.size:
        raise IndexCorruptionError(
            f"index outside [0, {codebook.size}) in layer {q.layer_id}")
    return np.concatenate(
        [codebook.centroids[g][q.indices[:, g]] for g in range(codebook.groups)], axis=1)


def ema_update(codebook: Codebook, x: np.ndarray, q: QuantizedTokens) -> None:
    """Fold one batch into the EMA accumulators and recompute centroids.

    centroid[g][k] = ema_sums[g][k] / (ema_counts[g][k] + smoothing); total
    EMA mass stays a convex combination of the old mass and the batch size.
    """
    x = np.asarray(x)
    if x.shape != (q.token_count, codebook.dim):
        raise ShapeError("batch does not match the quantization it came from")
    gd = codebook.group_dim
    d, k = codebook.decay, codebook.size
    dtype = codebook.centroids[0].dtype
    for g in range(codebook.groups):
        assign = q.indices[:, g]
        hist = np.bincount(assign, minlength=k).astype(np.float64)
        bsum = np.zeros((k, gd), dtype=np.float64)
        np.add.at(bsum, assign, x[:, g * gd:(g + 1) * gd].astype(np.float64, copy=False))
        codebook.ema_counts[g] = d * codebook.ema_counts[g] + (1.0 - d) * hist
        codebook.ema_sums[g] = d * codebook.ema_sums[g] + (1.0 - d) * bsum
        denom = (codebook.ema_counts[g] + codebook.smoothing)[:, None]
        codebook.centroids[g] = (codebook.ema_sums[g] / denom).astype(dtype)


def commitment_loss(x: Tensor, x_hat, beta: float) -> Tensor:
    """beta * sum((X - sg(X_hat))^2); gradient w.r.t. X is 2*beta*(X - X_hat)."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    xh = x_hat if isinstance(x_hat, Tensor) else Tensor(x_hat, dtype=x.data.dtype)
    diff = sub(x, stop_gradient(xh))
    return scale(tsum(mul(diff, diff)), beta)


class ResidualAccumulator:
    """Streaming moments of residuals across batches."""

    def __init__(self, layer_id: int, dim: int):
        self.layer_id = layer_id
        self.count = 0
        self._sum = np.zeros(dim, dtype=np.float64)
        self._sumsq = np.zeros(dim, dtype=np.float64)

    def update(self, x: np.ndarray, x_hat: np.ndarray) -> None:
        eps = np.asarray(x, dtype=np.float64) - np.asarray(x_hat, dtype=np.float64)
        if eps.ndim != 2 or eps.shape[1] != self._sum.shape[0]:
            raise ShapeError("residual batch width mismatch")
        self.count += eps.shape[0]
        self._sum += eps.sum(axis=0)
        self._sumsq += (eps * eps).sum(axis=0)

    def finalize(self, mode: str = "isotropic") -> ResidualStats:
        if mode not in ("isotropic", "diagonal"):
            raise ValueError(f"unknown residual mode {mode!r}")
        if self.count < 2:
            raise ValueError("residual statistics need at least 2 samples")
        mean = self._sum / self.count
        per_dim = self._sumsq / self.count - mean * mean
        per_dim = np.maximum(per_dim, 0.0)
        if mode == "isotropic":
            variance = np.asarray(per_dim.mean())
        else:
            variance = per_dim
        return ResidualStats(layer_id=self.layer_id, mean=mean, mode=mode,
                             variance=variance, sample_count=self.count)


def fit_residual_stats(x: np.ndarray, x_hat: np.ndarray, layer_id: int = 0,
                       mode: str = "isotropic") -> ResidualStats:
    """One-shot residual moments for a single batch."""
    acc = ResidualAccumulator(layer_id, np.asarray(x).shape[1])
    acc.update(x, x_hat)
    return acc.finalize(mode)


def apply_noise(x_hat: np.ndarray, stats: ResidualStats, cfg: NoiseConfig,
                training: bool) -> np.ndarray:
    """X_tilde = X_hat + lam * xi with xi keyed by (seed, layer, token, dim).

    Disabled or lam=0 returns x_hat unchanged (same array).  Enabled outside
    training raises ModeError: noise is a training-time regularizer only.
    """
    if not cfg.enabled or cfg.lam == 0.0:
        return x_hat
    if not training:
        raise ModeError("reconstruction noise must be off at inference")
    t, d = x_hat.shape
    if stats.mean.shape[0] != d:
        raise ShapeError("residual stats width does not match embeddings")
    z = rng.keyed_normal(cfg.seed, ("navq", stats.layer_id), t, d)
    xi = stats.mean[None, :] + stats.per_dim_std()[None, :] * z
    return (x_hat + cfg.lam * xi).astype(x_hat.dtype)


def save_codebook(codebook: Codebook) -> bytes:
    """Serialize the full codebook state: magic, layer id, G, K, D/G as LE
    u32; float32 centroids ordered group-major, index-major, dimension-minor;
    then the float64 EMA counts and sums in the same order."""
    head = MAGIC + struct.pack("<4I", codebook.layer_id, codebook.groups,
                               codebook.size, codebook.group_dim)
    body = b"".join(np.ascontiguousarray(c, dtype="<f4").tobytes()
                    for c in codebook.centroids)
    ema = np.ascontiguousarray(codebook.ema_counts, dtype="<f8").tobytes()
    ema += b"".join(np.ascontiguousarray(s, dtype="<f8").tobytes()
                    for s in codebook.ema_sums)
    return head + body + ema


def load_codebook(blob: bytes) -> Codebook:
    """Inverse of save_codebook, EMA accumulators included."""
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise ValueError("not a codebook blob (bad magic)")
    layer_id, groups, k, gd = struct.unpack("<4I", blob[4:20])
    expect = 20 + 4 * groups * k * gd + 8 * groups * k + 8 * groups * k * gd
    if len(blob) != expect:
        raise ValueError(f"codebook blob length {len(blob)} != expected {expect}")
    flat = np.frombuffer(blob, dtype="<f4", offset=20, count=groups * k * gd)
    tables = [flat[g * k * gd:(g + 1) * k * gd].reshape(k, gd).copy()
              for g in range(groups)]
    off = 20 + 4 * groups * k * gd
    counts = np.frombuffer(blob, dtype="<f8", offset=off,
                           count=groups * k).reshape(groups, k).copy()
    off += 8 * groups * k
    sums_flat = np.frombuffer(blob, dtype="<f8", offset=off)
    sums = [sums_flat[g * k * gd:(g + 1) * k * gd].reshape(k, gd).copy()
            for g in range(groups)]
    return Codebook(layer_id=layer_id, groups=groups, centroids=tables,
                    ema_counts=counts, ema_sums=sums)

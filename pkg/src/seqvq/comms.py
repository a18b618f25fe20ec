"""Analytic communication and latency model.

Volumes are exact rationals ("bits per token" counts one copy of every
transmitted payload over a full forward pass); times come from a ring
collective model: an allgather of per-device shards of S bits costs
(N-1) * S/B + (N-1) * msg_latency, an allreduce of a full activation costs
2 * (N-1)/N * volume/B per operation.  Compute is a per-layer FLOP count
times a seconds-per-FLOP profile, divided across devices for the
sequence-parallel family.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from fractions import Fraction

from .errors import ShapeError
from .vq import index_bits

METHODS = ("single", "astra", "sp", "tp", "bp_ag", "bp_sp")
BENCH_COLUMNS = ("method", "Nb", "bandwidth_mbps", "devices", "tokens",
                 "compute_s", "comm_s", "total_s", "speedup")

# Effective throughput anchor for the default device profile, roughly a
# laptop-class GPU sustaining 2 TFLOP/s.
DEFAULT_SECONDS_PER_FLOP = 5e-13


@dataclass(frozen=True)
class CommsConfig:
    layers: int
    hidden: int
    tokens: int
    devices: int
    bandwidth_bps: Fraction | int
    codebook_size: int = 1024
    groups: int = 1
    precision_bits: int = 32
    msg_latency_s: Fraction | float = 0
    heads: int = 12
    mlp_expansion: int = 4
    seconds_per_flop: float = DEFAULT_SECONDS_PER_FLOP
    # Baseline coefficients: volume multiplier and per-device compute overhead
    # for the block-parallel baselines.
    bp_ag_volume_coeff: Fraction | int = 1
    bp_sp_volume_coeff: Fraction | int = 2
    bp_ag_compute_coeff: float = 1.2
    bp_sp_compute_coeff: float = 1.0

    def __post_init__(self):
        if min(self.layers, self.hidden, self.tokens, self.devices) < 1:
            raise ValueError("layers/hidden/tokens/devices must be positive")
        if Fraction(self.bandwidth_bps) <= 0:
            raise ValueError("bandwidth must be positive")
        if self.precision_bits < 1:
            raise ValueError("precision must be at least one bit")
        if Fraction(self.msg_latency_s) < 0:
            raise ValueError("per-message latency cannot be negative")


@dataclass(frozen=True)
class MethodSpec:
    method: str
    nb: int = 1  # block count for the block-parallel baselines

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.nb < 1:
            raise ValueError("Nb must be at least 1")


@dataclass(frozen=True)
class LatencyReport:
    method: str
    nb: int
    compute_s: float
    comm_s: float

    @property
    def total_s(self) -> float:
        return self.compute_s + self.comm_s

    @property
    def comm_fraction(self) -> float:
        return self.comm_s / self.total_s if self.total_s else 0.0


def bits_per_token(cfg: CommsConfig, spec: MethodSpec) -> Fraction:
    """Exact bits each token contributes to the network over one forward."""
    full = Fraction(cfg.hidden * cfg.precision_bits)
    if spec.method == "single":
        return Fraction(0)
    if spec.method == "astra":
        return Fraction(cfg.layers * cfg.groups * index_bits(cfg.codebook_size))
    if spec.method == "sp":
        return cfg.layers * full
    if spec.method == "tp":
        # two allreduces per layer, ring cost factor 2 per value
        return 2 * 2 * cfg.layers * full
    if spec.method == "bp_ag":
        return spec.nb * full * Fraction(cfg.bp_ag_volume_coeff)
    if spec.method == "bp_sp":
        return spec.nb * full * Fraction(cfg.bp_sp_volume_coeff)
    raise ValueError(spec.method)


def compression_ratio(cfg: CommsConfig) -> Fraction:
    """Full-precision embedding bits over index bits, exact."""
    idx = cfg.groups * index_bits(cfg.codebook_size)
    if idx <= 0:
        raise ValueError("compression ratio undefined for a 1-entry codebook")
    return Fraction(cfg.hidden * cfg.precision_bits, idx)


def _allgather_time(cfg: CommsConfig, shard_bits: Fraction, rounds: int) -> Fraction:
    n = cfg.devices
    if n == 1:
        return Fraction(0)
    b = Fraction(cfg.bandwidth_bps)
    lat = Fraction(cfg.msg_latency_s)
    return rounds * ((n - 1) * shard_bits / b + (n - 1) * lat)


def comm_time_exact(cfg: CommsConfig, spec: MethodSpec) -> Fraction:
    """Per-forward communication time as an exact rational, seconds."""
    n = cfg.devices
    if spec.method == "single" or n == 1:
        return Fraction(0)
    shard_tokens = Fraction(cfg.tokens, n)
    full_row = Fraction(cfg.hidden * cfg.precision_bits)
    if spec.method == "astra":
        shard = shard_tokens * cfg.groups * index_bits(cfg.codebook_size)
        return _allgather_time(cfg, shard, cfg.layers)
    if spec.method == "sp":
        return _allgather_time(cfg, shard_tokens * full_row, cfg.layers)
    if spec.method == "tp":
        b = Fraction(cfg.bandwidth_bps)
        lat = Fraction(cfg.msg_latency_s)
        per_allreduce = 2 * Fraction(n - 1, n) * (cfg.tokens * full_row) / b \
            + 2 * (n - 1) * lat
        return 2 * cfg.layers * per_allreduce
    if spec.method == "bp_ag":
        shard = shard_tokens * full_row * Fraction(cfg.bp_ag_volume_coeff)
        return _allgather_time(cfg, shard, spec.nb)
    if spec.method == "bp_sp":
        shard = shard_tokens * full_row * Fraction(cfg.bp_sp_volume_coeff)
        return _allgather_time(cfg, shard, spec.nb)
    raise ValueError(spec.method)


def comm_time(cfg: CommsConfig, spec: MethodSpec) -> float:
    return float(comm_time_exact(cfg, spec))


def _layer_flops(cfg: CommsConfig, tokens_per_device: Fraction) -> Fraction:
    """Attention + MLP FLOPs for one layer's shard (2 FLOPs per MAC)."""
    d = cfg.hidden
    t = tokens_per_device
    proj = 8 * t * d * d                       # QKVO projections
    scores = 4 * t * cfg.tokens * d            # logits + weighted values
    mlp = 4 * t * d * (cfg.mlp_expansion * d)  # two linear maps
    return proj + scores + mlp


def compute_time(cfg: CommsConfig, spec: MethodSpec) -> float:
    """Per-forward compute seconds under the seconds-per-FLOP profile."""
    n = cfg.devices
    t_dev = Fraction(cfg.tokens, n)
    base = cfg.layers * _layer_flops(cfg, Fraction(cfg.tokens))
    if spec.method == "single":
        flops = base
    elif spec.method == "tp":
        flops = base / n
    elif spec.method == "sp":
        flops = cfg.layers * _layer_flops(cfg, t_dev)
    elif spec.method == "astra":
        # sequence-parallel work plus the nearest-centroid search
        search = cfg.layers * 2 * t_dev * cfg.codebook_size * cfg.hidden
        flops = cfg.layers * _layer_flops(cfg, t_dev) + search
    elif spec.method == "bp_ag":
        flops = base / n * Fraction(cfg.bp_ag_compute_coeff).limit_denominator(10**6)
    elif spec.method == "bp_sp":
        flops = base / n * Fraction(cfg.bp_sp_compute_coeff).limit_denominator(10**6)
    else:
        raise ValueError(spec.method)
    return float(flops) * cfg.seconds_per_flop


def calibrate_seconds_per_flop(cfg: CommsConfig, single_total_s: float) -> float:
    """Choose the profile so a single-device forward matches an anchor time."""
    base = float(cfg.layers * _layer_flops(cfg, Fraction(cfg.tokens)))
    if single_total_s <= 0:
        raise ValueError("anchor time must be positive")
    return single_total_s / base


def latency_breakdown(cfg: CommsConfig, spec: MethodSpec) -> LatencyReport:
    return LatencyReport(method=spec.method, nb=spec.nb,
                         compute_s=compute_time(cfg, spec),
                         comm_s=comm_time(cfg, spec))


def speedup(cfg: CommsConfig, spec: MethodSpec) -> float:
    """Single-device total over this method's total."""
    single = latency_breakdown(cfg, MethodSpec("single")).total_s
    return single / latency_breakdown(cfg, spec).total_s


def speedup_table(cfg: CommsConfig, specs: list[MethodSpec],
                  bandwidths_mbps: list, devices: list[int],
                  tokens: list[int]) -> list[dict]:
    """Sweep (bandwidth, N, T, method); speedups are against a single device
    with the same token count."""
    rows = []
    for t in tokens:
        for n in devices:
            for bw in bandwidths_mbps:
                c = replace(cfg, tokens=t, devices=n,
                            bandwidth_bps=Fraction(bw) * 10**6)
                single = latency_breakdown(c, MethodSpec("single")).total_s
                for spec in specs:
                    rep = latency_breakdown(c, spec)
                    rows.append({
                        "method": spec.method, "Nb": spec.nb,
                        "bandwidth_mbps": float(bw), "devices": n, "tokens": t,
                        "compute_s": rep.compute_s, "comm_s": rep.comm_s,
                        "total_s": rep.total_s,
                        "speedup": single / rep.total_s,
                    })
    return rows


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".6g")
    return str(value)


def bench_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BENCH_COLUMNS)
    for r in rows:
        writer.writerow([_fmt(r[c]) for c in BENCH_COLUMNS])
    return buf.getvalue()


def breakdown_long_csv(rows: list[dict]) -> str:
    """Plot-ready long format: one row per (sweep point, component)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("method", "Nb", "bandwidth_mbps", "devices", "tokens",
                     "component", "seconds"))
    for r in rows:
        for comp, key in (("compute", "compute_s"), ("comm", "comm_s")):
            writer.writerow([_fmt(r[c]) for c in
                             ("method", "Nb", "bandwidth_mbps", "devices", "tokens")]
                            + [comp, _fmt(r[key])])
    return buf.getvalue()

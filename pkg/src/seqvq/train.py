"""Task-loss training with straight-through quantization.

Backprop updates the network weights through L = L_task + beta * ||X -
sg(X_hat)||^2 per quantized layer; codebooks themselves never receive
gradients and move only by EMA.  Includes two synthetic tasks (sequence
classification over planted anchor pairs, and a Markov-chain language task),
codebook/residual-statistics initialization from reference captures, and the
regularization/aggregation ablation.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .cluster import partition_tokens
from .errors import ConfigError
from .model import ModelConfig, ModelParams, classify, init_params, lm_logits, lm_loss
from .tensor import Tape, Tensor, add, cross_entropy, scale
from .vq import (NoiseConfig, QuantizedTokens, ResidualAccumulator, commitment_loss,
                 ema_update, fit_residual_stats, kmeans_init)

TASKS = ("classify", "lm")
ABLATION_COLUMNS = ("task", "lam", "beta", "groups", "cls_mode", "seed",
                    "train_metric", "val_metric", "gap")

# the four corner clusters; the label is which one the signal tokens came from
_ANCHORS = np.array([[1.5, 1.5], [1.5, -1.5], [-1.5, 1.5], [-1.5, -1.5]])
CLASSIFY_CLASSES = len(_ANCHORS)


@dataclass(frozen=True)
class TrainConfig:
    task: str = "classify"
    beta: float = 0.25
    lam: float = 0.0
    lr: float = 3e-3
    epochs: int = 4
    batch_size: int = 8
    seed: int = 0
    cls_mode: str = "distributed"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    refresh_residual_stats: bool = False

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if not (0.0 <= self.lam <= 1.0):
            raise ConfigError("lam must lie in [0, 1]")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("invalid optimizer settings")

    def noise(self) -> NoiseConfig:
        return NoiseConfig(lam=self.lam, enabled=self.lam > 0.0, seed=self.seed)


def make_classify_data(dim: int, tokens: int, count: int, seed: int,
                       spread: float = 0.3, signal_fraction: float = 0.25,
                       task_seed: int = 0):
    """Sequences of noisy 2-D cluster samples lifted into ``dim`` dimensions.

    Most tokens are background draws around the origin; a random quarter of
    the positions carry samples from one of the four corner clusters, and the
    label is which corner.  The signal positions are scattered across the
    sequence, so recovering the pattern requires pooling the whole sequence
    rather than any one shard.  ``task_seed`` fixes the lifting map — splits
    that should share one task must share it — while ``seed`` varies the
    samples.
    """
    gen = rng.generator(seed, "classify-data")
    lift = rng.generator(task_seed, "classify-lift").normal(size=(2, dim)) / math.sqrt(2.0)
    signal_count = max(1, round(tokens * signal_fraction))
    inputs, labels = [], []
    for _ in range(count):
        label = int(gen.integers(0, CLASSIFY_CLASSES))
        pts = gen.normal(size=(tokens, 2)) * spread
        where = gen.choice(tokens, size=signal_count, replace=False)
        pts[where] += _ANCHORS[label]
        inputs.append((pts @ lift).astype(np.float32))
        labels.append(label)
    return inputs, np.asarray(labels, dtype=np.int64)


def make_lm_data(vocab: int, tokens: int, count: int, seed: int,
                 task_seed: int = 0):
    """Markov-chain sequences: rows of softmax(2 * N(0,1)) transitions.

    ``task_seed`` fixes the chain; ``seed`` varies the sampled walks."""
    if vocab > 64:
        raise ConfigError("toy language task caps the vocabulary at 64")
    gen = rng.generator(seed, "lm-data")
    logits = 2.0 * rng.generator(task_seed, "lm-chain").normal(size=(vocab, vocab))
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    seqs = []
    for _ in range(count):
        ids = np.empty(tokens + 1, dtype=np.int64)
        ids[0] = int(gen.integers(0, vocab))
        for t in range(tokens):
            ids[t + 1] = int(gen.choice(vocab, p=p[ids[t]]))
        seqs.append(ids)
    return seqs


class Adam:
    """Per-tensor Adam with bias correction."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.steps = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        self.steps += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.steps
        bc2 = 1.0 - b2 ** self.steps
        for name, tensor in params.named_tensors():
            g = grads.get(name)
            if g is None:
                continue
            g = g.astype(np.float64)
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(g)
                self._v[name] = np.zeros_like(g)
            v = self._v[name]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self._m[name], self._v[name] = m, v
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            new = tensor.data.astype(np.float64) - self.lr * update
            params.assign(name, new.astype(tensor.data.dtype))


def _task_loss(params: ModelParams, plan, example, cfg: TrainConfig,
               noise, on_layer) -> Tensor:
    if cfg.task == "classify":
        x, label = example
        logits = classify(params, plan, x, training=True, noise=noise,
                          cls_mode=cfg.cls_mode, on_layer=on_layer)
        return cross_entropy(logits, [label])
    ids = example
    return lm_loss(params, plan, ids[:-1], ids[1:], training=True, noise=noise,
                   on_layer=on_layer)


def _reference_captures(params: ModelParams, plan1, dataset, task: str):
    """Per-layer block inputs from unquantized single-device forwards."""
    layers = [[] for _ in params.blocks]

    def capture(i, info):
        layers[i].append(info["x_in"])

    examples = dataset[0] if task == "classify" else dataset
    for example in examples:
        if task == "classify":
            classify(params, plan1, example, on_layer=capture)
        else:
            lm_logits(params, plan1, example[:-1], on_layer=capture)
    return [np.concatenate(xs, axis=0) for xs in layers]


def initialize_codebooks(params: ModelParams, dataset, task: str,
                         codebook_size: int, groups: int, seed: int = 0,
                         iterations: int = 25) -> None:
    """Fit per-layer codebooks and residual statistics from reference
    captures, in place."""
    plan1 = partition_tokens(_example_tokens(dataset, task), 1)
    captures = _reference_captures(params, plan1, dataset, task)
    from .vq import quantize  # local import to keep module top uncluttered
    for i, (bp, x) in enumerate(zip(params.blocks, captures)):
        cb, _ = kmeans_init(x, codebook_size, groups, iterations=iterations,
                            seed=seed, layer_id=i)
        q, x_hat = quantize(cb, x)
        bp.codebook = cb
        bp.residual_stats = fit_residual_stats(x, x_hat, layer_id=i)


def _example_tokens(dataset, task: str) -> int:
    return (dataset[0][0].shape[0] if task == "classify"
            else dataset[0].shape[0] - 1)


def train_step(params: ModelParams, plan, batch, cfg: TrainConfig,
               opt: Adam, accumulators: list[ResidualAccumulator] | None = None
               ) -> float:
    """One optimizer step over a batch; EMA-updates every codebook."""
    tape = Tape()
    bound = params.bind(tape)
    per_layer_x: list[list[np.ndarray]] = [[] for _ in params.blocks]
    per_layer_q: list[list[np.ndarray]] = [[] for _ in params.blocks]
    terms = []

    for j, example in enumerate(batch):
        # fresh regularization noise each step and example, deterministically
        noise = NoiseConfig(lam=cfg.lam, enabled=cfg.lam > 0.0,
                            seed=cfg.seed + 1_000_003 * opt.steps + 7919 * j)
        commits = []

        def capture(i, info):
            per_layer_x[i].append(info["x_in"])
            per_layer_q[i].append(info["q"].indices)
            if cfg.beta > 0.0:
                commits.append(commitment_loss(info["x_tensor"], info["x_hat"],
                                               cfg.beta))

        loss = _task_loss(bound, plan, example, cfg, noise, capture)
        for cterm in commits:
            loss = add(loss, cterm)
        terms.append(loss)

    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    total = scale(total, 1.0 / len(terms))
    tape.backward(total)

    grads = {name: tape.grad(t) for name, t in bound.named_tensors()}
    opt.step(params, grads)

    for i, bp in enumerate(params.blocks):
        x = np.concatenate(per_layer_x[i], axis=0)
        idx = np.concatenate(per_layer_q[i], axis=0)
        q = QuantizedTokens(layer_id=bp.codebook.layer_id, token_count=x.shape[0],
                            indices=idx, bits_per_token=bp.codebook.bits_per_token)
        ema_update(bp.codebook, x, q)
        if accumulators is not None:
            from .vq import dequantize
            accumulators[i].update(x, dequantize(bp.codebook, q))
    return float(total.data)


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else math.nan


def train(params: ModelParams, plan, dataset, cfg: TrainConfig) -> TrainHistory:
    """Epoch loop with seeded shuffling; refreshes residual statistics at the
    end when configured to track the drifting codebooks."""
    opt = Adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    history = TrainHistory()
    n = len(dataset[0]) if cfg.task == "classify" else len(dataset)
    accumulators = None
    if cfg.refresh_residual_stats:
        accumulators = [ResidualAccumulator(i, params.config.hidden)
                        for i in range(len(params.blocks))]
    for epoch in range(cfg.epochs):
        order = rng.generator(cfg.seed, "order", epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            take = order[start:start + cfg.batch_size]
            if cfg.task == "classify":
                inputs, labels = dataset
                batch = [(inputs[j], int(labels[j])) for j in take]
            else:
                batch = [dataset[j] for j in take]
            history.losses.append(train_step(params, plan, batch, cfg, opt,
                                             accumulators))
    if accumulators is not None and accumulators[0].count >= 2:
        for bp, acc in zip(params.blocks, accumulators):
            bp.residual_stats = acc.finalize()
    return history


def evaluate_classifier(params: ModelParams, plan, dataset,
                        cls_mode: str = "distributed") -> float:
    inputs, labels = dataset
    hits = 0
    for x, y in zip(inputs, labels):
        logits = classify(params, plan, x, cls_mode=cls_mode)
        hits += int(np.argmax(logits.data[0]) == y)
    return hits / len(inputs)


def evaluate_lm(params: ModelParams, plan, dataset) -> float:
    """Perplexity: exp of the mean next-token cross-entropy."""
    total, count = 0.0, 0
    for ids in dataset:
        loss = lm_loss(params, plan, ids[:-1], ids[1:])
        total += float(loss.data) * (len(ids) - 1)
        count += len(ids) - 1
    return math.exp(total / count)


@dataclass(frozen=True)
class AblationSettings:
    hidden: int = 32
    layers: int = 2
    heads: int = 4
    tokens: int = 16
    devices: int = 4
    codebook_size: int = 8
    lr: float = 3e-3
    epochs: int = 5
    batch_size: int = 8
    train_count: int = 128
    val_count: int = 256
    lams: tuple = (0.0, 1.0)
    betas: tuple = (0.25,)
    groups_set: tuple = (1,)
    cls_modes: tuple = ("single", "distributed")
    seeds: tuple = (0, 1, 2, 3, 4)


def _ablation_run(st: AblationSettings, lam: float, beta: float, groups: int,
                  cls_mode: str, seed: int):
    cfg = ModelConfig(layers=st.layers, hidden=st.hidden, heads=st.heads,
                      vocab_or_classes=CLASSIFY_CLASSES,
                      max_tokens=st.tokens + 1, causal=False,
                      codebook_size=st.codebook_size, groups=groups)
    params = init_params(cfg, seed=seed)
    train_set = make_classify_data(st.hidden, st.tokens, st.train_count,
                                   seed=seed, task_seed=seed)
    val_set = make_classify_data(st.hidden, st.tokens, st.val_count,
                                 seed=seed + 10_000, task_seed=seed)
    tcfg = TrainConfig(task="classify", beta=beta, lam=lam, lr=st.lr,
                       epochs=st.epochs, batch_size=st.batch_size, seed=seed,
                       cls_mode=cls_mode)
    initialize_codebooks(params, train_set, "classify",
                         st.codebook_size, groups, seed=seed)
    plan = partition_tokens(st.tokens, st.devices)
    train(params, plan, train_set, tcfg)
    train_acc = evaluate_classifier(params, plan, train_set, cls_mode)
    val_acc = evaluate_classifier(params, plan, val_set, cls_mode)
    return train_acc, val_acc


def run_ablation(settings: AblationSettings = AblationSettings(), on_row=None):
    """Grid over noise scale, commitment weight, group count, and class-token
    mode; returns ablation rows."""
    rows = []
    for lam in settings.lams:
        for beta in settings.betas:
            for groups in settings.groups_set:
                for cls_mode in settings.cls_modes:
                    for seed in settings.seeds:
                        train_acc, val_acc = _ablation_run(
                            settings, lam, beta, groups, cls_mode, seed)
                        row = ("classify", lam, beta, groups, cls_mode, seed,
                               train_acc, val_acc, train_acc - val_acc)
                        rows.append(row)
                        if on_row is not None:
                            on_row(row)
    return rows


def summarize_ablation(rows):
    """Per-cell means plus the two directional contrasts."""
    cells: dict[tuple, list] = {}
    for row in rows:
        key = (row[1], row[2], row[3], row[4])  # (lam, beta, groups, cls_mode)
        cells.setdefault(key, []).append(row)
    summary = {}
    for key, group in sorted(cells.items()):
        train_mean = float(np.mean([r[6] for r in group]))
        val_mean = float(np.mean([r[7] for r in group]))
        gap_mean = float(np.mean([r[8] for r in group]))
        val_std = float(np.std([r[7] for r in group]))
        summary[key] = {"train": train_mean, "val": val_mean, "gap": gap_mean,
                        "val_std": val_std, "runs": len(group)}
    contrasts = {}
    lams = sorted({k[0] for k in summary})
    combos = sorted({(k[1], k[2]) for k in summary})
    modes = {k[3] for k in summary}
    for beta, groups in combos:
        if {"single", "distributed"} <= modes:
            for lam in lams:
                a = (lam, beta, groups, "distributed")
                b = (lam, beta, groups, "single")
                if a in summary and b in summary:
                    contrasts[f"distributed_minus_single_val@lam={lam:g}"] = (
                        summary[a]["val"] - summary[b]["val"])
        for mode in sorted(modes):
            keyed = [lam for lam in lams if (lam, beta, groups, mode) in summary]
            if len(keyed) >= 2:
                lo, hi = min(keyed), max(keyed)
                contrasts[f"gap@lam={hi:g}_minus_gap@lam={lo:g}[{mode}]"] = (
                    summary[(hi, beta, groups, mode)]["gap"]
                    - summary[(lo, beta, groups, mode)]["gap"])
    return summary, contrasts


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ABLATION_COLUMNS)
    for row in rows:
        task, lam, beta, groups, cls_mode, seed, tr, va, gap = row
        writer.writerow((task, format(lam, "g"), format(beta, "g"), groups,
                         cls_mode, seed, format(tr, ".6g"), format(va, ".6g"),
                         format(gap, ".6g")))
    return buf.getvalue()


def summary_text(summary, contrasts) -> str:
    lines = ["cell (lam, beta, groups, cls_mode): train / val / gap (val std, runs)"]
    for key, stats in summary.items():
        lam, beta, groups, mode = key
        lines.append(f"  lam={lam:g} beta={beta:g} G={groups} {mode}: "
                     f"{stats['train']:.4f} / {stats['val']:.4f} / "
                     f"{stats['gap']:+.4f} (std {stats['val_std']:.4f}, "
                     f"n={stats['runs']})")
    for name, value in contrasts.items():
        lines.append(f"  {name}: {value:+.4f}")
    return "\n".join(lines) + "\n"

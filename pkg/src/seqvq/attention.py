"""Masked multi-head attention over mixed full-precision / dequantized keys.

The key/value set for a query is the concatenation [K | K_hat] of the
full-precision projections and the projections of dequantized embeddings;
a boolean mask of width 2T routes every query to the full-precision column
for same-device tokens and the dequantized column for everything else.
Queries are never quantized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import MaskError, PlanError, ShapeError
from .tensor import Tensor, cols, concat_cols, concat_rows, masked_softmax, matmul, scale, transpose


@dataclass(frozen=True)
class MixedPrecisionMask:
    """Boolean [T, 2T] routing matrix; column j is full-precision token j,
    column T+j its dequantized twin."""

    tokens: int
    devices: int
    causal: bool
    matrix: np.ndarray

    def __post_init__(self):
        if self.matrix.shape != (self.tokens, 2 * self.tokens):
            raise ShapeError("mask must be [T, 2T]")


def build_mask(tokens: int, plan, causal: bool) -> MixedPrecisionMask:
    """Mask for a shard plan: same-shard keys full precision, rest dequantized."""
    if plan.tokens != tokens:
        raise PlanError(f"plan covers {plan.tokens} tokens, mask wants {tokens}")
    owner = plan.owner_of()
    same = owner[:, None] == owner[None, :]
    if causal:
        visible = np.tril(np.ones((tokens, tokens), dtype=bool))
    else:
        visible = np.ones((tokens, tokens), dtype=bool)
    m = np.concatenate([visible & same, visible & ~same], axis=1)
    return MixedPrecisionMask(tokens=tokens, devices=plan.devices, causal=causal, matrix=m)


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray,
                        heads: int) -> Tensor:
    """softmax(q k^T / sqrt(d_k) masked) v, per head, heads concatenated."""
    r, d = q.data.shape
    c = k.data.shape[0]
    if k.data.shape[1] != d or v.data.shape != (c, d):
        raise ShapeError("q/k/v widths disagree")
    if d % heads != 0:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    if mask.shape != (r, c):
        raise ShapeError(f"mask {mask.shape} does not cover [{r}, {c}] scores")
    if not mask.any(axis=1).all():
        raise MaskError("a query row attends to nothing")
    dk = d // heads
    inv = 1.0 / math.sqrt(dk)
    outs = []
    for h in range(heads):
        qh = cols(q, h * dk, (h + 1) * dk)
        kh = cols(k, h * dk, (h + 1) * dk)
        vh = cols(v, h * dk, (h + 1) * dk)
        logits = scale(matmul(qh, transpose(kh)), inv)
        weights = masked_softmax(logits, mask)
        outs.append(matmul(weights, vh))
    return concat_cols(outs) if heads > 1 else outs[0]


def mixed_precision_attention(q: Tensor, k: Tensor, k_hat: Tensor, v: Tensor,
                              v_hat: Tensor, mask: MixedPrecisionMask,
                              heads: int) -> Tensor:
    """Attention over the concatenated [K | K_hat], [V | V_hat] sets."""
    t = mask.tokens
    for name, ten in (("k", k), ("k_hat", k_hat), ("v", v), ("v_hat", v_hat)):
        if ten.data.shape[0] != t:
            raise ShapeError(f"{name} must have {t} rows")
    kcat = concat_rows([k, k_hat])
    vcat = concat_rows([v, v_hat])
    return multihead_attention(q, kcat, vcat, mask.matrix, heads)


def standard_attention(q: Tensor, k: Tensor, v: Tensor, causal: bool,
                       heads: int) -> Tensor:
    """Vanilla full-precision attention (optionally causal)."""
    r = q.data.shape[0]
    c = k.data.shape[0]
    if causal:
        if r != c:
            raise ShapeError("causal attention requires square scores")
        mask = np.tril(np.ones((r, c), dtype=bool))
    else:
        mask = np.ones((r, c), dtype=bool)
    return multihead_attention(q, k, v, mask, heads)


def softmax_perturbation_first_order(alpha: np.ndarray, e: np.ndarray) -> np.ndarray:
    """First-order change of softmax weights under logit perturbation e:
    delta_j = alpha_j * (e_j - sum_k alpha_k e_k)."""
    a = np.asarray(alpha, dtype=np.float64)
    eps = np.asarray(e, dtype=np.float64)
    if a.shape != eps.shape or a.ndim != 1:
        raise ShapeError("alpha and e must be 1-D and congruent")
    if (a < 0).any() or abs(a.sum() - 1.0) > 1e-6:
        raise ValueError("alpha must be a probability vector")
    return a * (eps - float(a @ eps))

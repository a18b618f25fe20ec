"""Dense tensor kernels and a reverse-mode differentiation tape.

Deliberately small: only the operations the toy Transformer and its losses
need.  Arrays are row-major float32 or float64; matmul always accumulates at
64-bit regardless of storage precision.  No broadcasting beyond row-wise
bias addition.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import MaskError, ShapeError

MASK_FILL = -1e9
_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


class Tensor:
    """Immutable dense array, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, dtype=None):
        arr = np.array(data, copy=True)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        arr.flags.writeable = False
        self.data = arr
        self.tape = None
        self.node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape=None, node=None) -> "Tensor":
        t = cls.__new__(cls)
        if not isinstance(arr, np.ndarray):
            arr = np.asarray(arr)
        arr.flags.writeable = False
        t.data = arr
        t.tape = tape
        t.node = node
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Tape:
    """Single-writer operation record; every recorded node is visited once on backward."""

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._backwards: list = []
        self._grads: list | None = None

    def __len__(self):
        return len(self._parents)

    def variable(self, data, dtype=None) -> Tensor:
        """Register a leaf tensor whose gradient will be tracked."""
        t = Tensor(data, dtype=dtype)
        node = self._record((), None)
        return Tensor._wrap(t.data, self, node)

    def _record(self, parents: tuple[int, ...], backward) -> int:
        for p in parents:
            if p >= len(self._parents):
                raise ShapeError("tape parents must precede their node")
        self._parents.append(parents)
        self._backwards.append(backward)
        return len(self._parents) - 1

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and accumulate gradients into every leaf."""
        if loss.tape is not self or loss.node is None:
            raise ValueError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise ShapeError("backward requires a scalar loss")
        grads: list = [None] * len(self._parents)
        grads[loss.node] = np.ones_like(loss.data)
        for i in range(len(self._parents) - 1, -1, -1):
            g = grads[i]
            if g is None or self._backwards[i] is None:
                continue
            for pid, pg in zip(self._parents[i], self._backwards[i](g)):
                if grads[pid] is None:
                    grads[pid] = pg.copy()
                else:
                    grads[pid] += pg
        self._grads = grads

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward() loss with respect to ``t``."""
        if self._grads is None:
            raise ValueError("backward() has not been run")
        if t.tape is not self or t.node is None:
            raise ValueError("tensor is not recorded on this tape")
        g = self._grads[t.node]
        return np.zeros_like(t.data) if g is None else g


def _op(data: np.ndarray, pairs) -> Tensor:
    """Record an op. ``pairs`` is [(tensor, grad_fn)] for differentiable inputs."""
    tape = None
    for t, _ in pairs:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ValueError("operands belong to different tapes")
            tape = t.tape
    tracked = [(t, fn) for t, fn in pairs if t.tape is not None and t.node is not None]
    if tape is None or not tracked:
        return Tensor._wrap(data)

    def backward(g):
        return [fn(g) for _, fn in tracked]

    node = tape._record(tuple(t.node for t, _ in tracked), backward)
    return Tensor._wrap(data, tape, node)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with 64-bit accumulation, cast back to storage dtype."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul requires 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.data.shape} x {b.data.shape}")
    dtype = a.data.dtype
    a64 = a.data.astype(np.float64, copy=False)
    b64 = b.data.astype(np.float64, copy=False)
    out = (a64 @ b64).astype(dtype)
    return _op(out, [
        (a, lambda g: (g.astype(np.float64, copy=False) @ b64.T).astype(dtype)),
        (b, lambda g: (a64.T @ g.astype(np.float64, copy=False)).astype(dtype)),
    ])


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose requires a 2-D operand")
    return _op(np.ascontiguousarray(a.data.T), [(a, lambda g: np.ascontiguousarray(g.T))])


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _op(a.data + b.data, [(a, lambda g: g), (b, lambda g: g)])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _op(a.data - b.data, [(a, lambda g: g), (b, lambda g: -g)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _op(ad * bd, [(a, lambda g: g * bd), (b, lambda g: g * ad)])


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _op(a.data * np.asarray(s, dtype=a.data.dtype),
               [(a, lambda g: g * np.asarray(s, dtype=g.dtype))])


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias: x[T, D] + b[D].  The only broadcast in the package."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"add_bias: {x.data.shape} + {b.data.shape}")
    return _op(x.data + b.data[None, :], [(x, lambda g: g), (b, lambda g: g.sum(axis=0))])


def tsum(a: Tensor) -> Tensor:
    """Sum all entries to a scalar."""
    shape = a.data.shape
    return _op(np.asarray(a.data.sum(), dtype=a.data.dtype),
               [(a, lambda g: np.full(shape, g, dtype=g.dtype))])


def mean_rows(x: Tensor) -> Tensor:
    """Mean over rows, kept 2-D: [N, D] -> [1, D]."""
    if x.data.ndim != 2:
        raise ShapeError("mean_rows requires a 2-D operand")
    n = x.data.shape[0]
    if n == 0:
        raise ShapeError("mean_rows of an empty tensor")
    return _op(x.data.mean(axis=0, keepdims=True).astype(x.data.dtype),
               [(x, lambda g: np.repeat(g / n, n, axis=0))])


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start <= stop <= x.data.shape[0]):
        raise ShapeError(f"rows [{start}:{stop}] of shape {x.data.shape}")
    shape = x.data.shape

    def bwd(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[start:stop] = g
        return out

    return _op(x.data[start:stop].copy(), [(x, bwd)])


def cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start <= stop <= x.data.shape[1]):
        raise ShapeError(f"cols [{start}:{stop}] of shape {x.data.shape}")
    shape = x.data.shape

    def bwd(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[:, start:stop] = g
        return out

    return _op(np.ascontiguousarray(x.data[:, start:stop]), [(x, bwd)])


def concat_rows(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows of nothing")
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    data = np.concatenate([p.data for p in parts], axis=0)

    def grad_fn(i):
        s, e = offsets[i], offsets[i + 1]
        return lambda g: g[s:e]

    return _op(data, [(p, grad_fn(i)) for i, p in enumerate(parts)])


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols of nothing")
    sizes = [p.data.shape[1] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    data = np.concatenate([p.data for p in parts], axis=1)

    def grad_fn(i):
        s, e = offsets[i], offsets[i + 1]
        return lambda g: np.ascontiguousarray(g[:, s:e])

    return _op(data, [(p, grad_fn(i)) for i, p in enumerate(parts)])


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: table[V, D] indexed by integer ids."""
    idx = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError("gather_rows needs a 2-D table and 1-D ids")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError("gather_rows: id out of range")
    shape = table.data.shape

    def bwd(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return out

    return _op(table.data[idx], [(table, bwd)])


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity; contributes zero gradient to its input."""
    return Tensor._wrap(x.data)


def straight_through(x: Tensor, values: np.ndarray) -> Tensor:
    """Forward takes ``values``; backward passes gradients to ``x`` unchanged."""
    vals = np.asarray(values, dtype=x.data.dtype)
    if vals.shape != x.data.shape:
        raise ShapeError(f"straight_through: {vals.shape} vs {x.data.shape}")
    return _op(vals.copy(), [(x, lambda g: g)])


def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Row softmax over active entries; masked entries add -1e9 pre-softmax and
    come out exactly 0."""
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if m.dtype != np.bool_:
        m = m.astype(bool)
    if logits.data.ndim != 2 or m.shape != logits.data.shape:
        raise ShapeError(f"masked_softmax: mask {m.shape} vs logits {logits.data.shape}")
    if not m.any(axis=1).all():
        raise MaskError("masked_softmax: a row has no active entry")
    x = logits.data + np.asarray(MASK_FILL, dtype=logits.data.dtype) * (~m)
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    e = np.where(m, e, 0.0).astype(logits.data.dtype)
    w = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        inner = (g * w).sum(axis=1, keepdims=True)
        return (w * (g - inner)).astype(g.dtype)

    return _op(w, [(logits, bwd)])


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization with learned gain/bias."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    if x.data.ndim != 2 or x.data.shape[1] < 1:
        raise ShapeError("layer_norm requires a 2-D input with D >= 1")
    d = x.data.shape[1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError("layer_norm: gain/bias must be 1-D of width D")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = (xc * inv).astype(x.data.dtype)
    out = xh * gain.data[None, :] + bias.data[None, :]
    gd = gain.data

    def bwd_x(g):
        gxh = g * gd[None, :]
        t1 = gxh.mean(axis=1, keepdims=True)
        t2 = (gxh * xh).mean(axis=1, keepdims=True)
        return ((gxh - t1 - xh * t2) * inv).astype(g.dtype)

    return _op(out.astype(x.data.dtype), [
        (x, bwd_x),
        (gain, lambda g: (g * xh).sum(axis=0)),
        (bias, lambda g: g.sum(axis=0)),
    ])


def gelu(x: Tensor) -> Tensor:
    """Exact erf form, 0.5*x*(1 + erf(x/sqrt(2)))."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = (xd * cdf).astype(xd.dtype)
    pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)

    def bwd(g):
        return (g * (cdf + xd * pdf)).astype(g.dtype)

    return _op(out, [(x, bwd)])


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under row softmax."""
    y = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or y.ndim != 1 or y.shape[0] != logits.data.shape[0]:
        raise ShapeError("cross_entropy: logits [B, C] with labels [B]")
    if y.size and (y.min() < 0 or y.max() >= logits.data.shape[1]):
        raise ShapeError("cross_entropy: label out of range")
    b = logits.data.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = np.asarray(-logp[np.arange(b), y].mean(), dtype=logits.data.dtype)
    soft = np.exp(logp)

    def bwd(g):
        out = soft.copy()
        out[np.arange(b), y] -= 1.0
        return (out * (g / b)).astype(g.dtype)

    return _op(loss, [(logits, bwd)])


def grad_check(f, params: list[np.ndarray], h: float = 1e-5) -> float:
    """Max relative error between tape gradients of ``f`` and central differences.

    ``f`` maps a list of Tensors to a scalar Tensor using ops from this module.
    Params are evaluated at 64-bit.  The relative error of one component is
    |analytic - central| / (|analytic| + |central| + 1e-12).
    """
    if not (1e-6 <= h <= 1e-2):
        raise ValueError("grad_check: h must lie in [1e-6, 1e-2]")
    base = [np.asarray(p, dtype=np.float64) for p in params]
    tape = Tape()
    xs = [tape.variable(p) for p in base]
    out = f(xs)
    if out.data.size != 1:
        raise ShapeError("grad_check: f must return a scalar")
    tape.backward(out)
    analytic = [tape.grad(x) for x in xs]

    def eval_at(arrays) -> float:
        val = f([constant(a) for a in arrays]).data
        return float(np.asarray(val).reshape(()))

    worst = 0.0
    for i, p in enumerate(base):
        flat = p.reshape(-1)
        for j in range(flat.size):
            bumped = [q.copy() for q in base]
            bumped[i].reshape(-1)[j] = flat[j] + h
            up = eval_at(bumped)
            bumped[i].reshape(-1)[j] = flat[j] - h
            down = eval_at(bumped)
            central = (up - down) / (2.0 * h)
            a = float(analytic[i].reshape(-1)[j])
            err = abs(a - central) / (abs(a) + abs(central) + 1e-12)
            worst = max(worst, err)
    return worst

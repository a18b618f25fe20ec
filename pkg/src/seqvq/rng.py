"""Deterministic randomness.

All randomness in the package flows from a single top-level seed through
named streams.  Two mechanisms cover every use:

* ``generator(seed, *names)`` derives an independent ``numpy`` generator for
  bulk sampling (weight init, synthetic data, k-means restarts).
* ``keyed_normal(seed, key, rows, cols)`` evaluates a counter-based Gaussian
  field: the value at (row, col) depends only on the key tuple, never on
  evaluation order or array chunking.
"""

from __future__ import annotations

import hashlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _stable_hash(name) -> int:
    """Map a stream name (str or int) to a stable 64-bit integer."""
    if isinstance(name, (int, np.integer)):
        return int(name) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(name).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def generator(seed: int, *names) -> np.random.Generator:
    """Return a PCG64 generator for the named substream of ``seed``."""
    if not isinstance(seed, (int, np.integer)):
        raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_stable_hash(n) for n in names]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def _mix(h: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, vectorized over uint64 arrays."""
    h = (h + _GOLDEN) & np.uint64(0xFFFFFFFFFFFFFFFF)
    h = (h ^ (h >> np.uint64(30))) * _MIX1
    h = (h ^ (h >> np.uint64(27))) * _MIX2
    return h ^ (h >> np.uint64(31))


def _combine(parts) -> np.ndarray:
    """Fold integer parts (scalars or broadcastable uint64 arrays) into one hash."""
    h = np.uint64(0)
    for p in parts:
        h = _mix(h ^ (np.asarray(p, dtype=np.uint64) * _GOLDEN))
    return h


def _to_unit(h: np.ndarray) -> np.ndarray:
    # 53 mantissa bits, shifted into (0, 1]; never 0 so log() is safe.
    return ((h >> np.uint64(11)) + np.uint64(1)) * (2.0 ** -53)


def keyed_normal(seed: int, key, rows: int, cols: int) -> np.ndarray:
    """Standard-normal field keyed by (seed, key, row, col).

    Uses Box-Muller on two counter-derived uniforms.  The entry at a given
    (row, col) is a pure function of the key tuple, so partial or chunked
    evaluation yields identical values.
    """
    r = np.arange(rows, dtype=np.uint64)[:, None]
    c = np.arange(cols, dtype=np.uint64)[None, :]
    with np.errstate(over="ignore"):
        base = _combine([np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF),
                         np.uint64(_stable_hash(key)), r, c])
        u1 = _to_unit(_mix(base ^ np.uint64(0xA5A5A5A5A5A5A5A5)))
        u2 = _to_unit(_mix(base ^ np.uint64(0x5A5A5A5A5A5A5A5A)))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

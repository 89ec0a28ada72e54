"""Counter-based random draws keyed by (seed, purpose, indices...).

Every draw is a pure function of its key, so results do not depend on the
order in which clients, rounds or replications are processed. Keys are mixed
with the splitmix64 finalizer; index arguments broadcast like numpy arrays,
which lets a whole round of clients be drawn in one call.
"""

from __future__ import annotations

import zlib

import numpy as np
from scipy.special import ndtri

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_MASK64 = (1 << 64) - 1


def _mix(h: np.ndarray) -> np.ndarray:
    # wraparound arithmetic is intended
    with np.errstate(over="ignore"):
        h = h + _GOLDEN
        h = (h ^ (h >> _S30)) * _M1
        h = (h ^ (h >> _S27)) * _M2
    return h ^ (h >> _S31)


def tag_id(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def _as_u64(value) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype.kind in "iu":
        return arr.astype(np.uint64) if arr.dtype != np.uint64 else arr
    if arr.dtype == object or arr.ndim == 0:
        return np.asarray(int(arr) & _MASK64, dtype=np.uint64)
    raise TypeError(f"integer index expected, got dtype {arr.dtype}")


def hash_key(seed: int, tag: str, *indices) -> np.ndarray:
    """64-bit hash of the key; broadcast over array-valued indices."""
    h = _mix(np.asarray(int(seed) & _MASK64, dtype=np.uint64))
    h = _mix(h ^ np.uint64(tag_id(tag)))
    for idx in indices:
        h = _mix(h ^ _as_u64(idx))
    return h


def derive_seed(seed: int, tag: str, *indices: int) -> int:
    """Child seed for an independent sub-experiment (e.g. a replication)."""
    return int(hash_key(seed, tag, *indices))


def uniform(seed: int, tag: str, *indices) -> np.ndarray:
    """Uniform draws strictly inside (0, 1), one per broadcast index."""
    h = hash_key(seed, tag, *indices)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def normal(seed: int, tag: str, *indices) -> np.ndarray:
    return ndtri(uniform(seed, tag, *indices))


def bernoulli(prob, seed: int, tag: str, *indices) -> np.ndarray:
    return uniform(seed, tag, *indices) < np.asarray(prob)


def integers(high: int, seed: int, tag: str, *indices) -> np.ndarray:
    """Integers in [0, high)."""
    u = uniform(seed, tag, *indices)
    return np.minimum((u * high).astype(np.int64), high - 1)


def grid(*shape: int) -> tuple[np.ndarray, ...]:
    """Open index grids for drawing a full array, e.g. normal(s, t, *grid(n, d))."""
    return tuple(np.ix_(*[np.arange(k, dtype=np.uint64) for k in shape]))

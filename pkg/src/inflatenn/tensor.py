"""Dense float32 arrays, seeded randomness and the reductions the rest builds on.

Tensors are plain ``numpy.ndarray`` objects in C (row-major) order with
``float32`` storage.  Reductions and products accumulate in ``float64`` and
round back to storage precision at the end.
"""
from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np

from .errors import DimensionError, DomainError

STORAGE_DTYPE = np.float32
ACCUM_DTYPE = np.float64

RNG_ALGORITHM = "philox4x64"


def tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Build a finite float32 tensor, optionally reshaping flat ``data``."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=STORAGE_DTYPE))
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise DimensionError(f"extents must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise DimensionError(f"cannot view {arr.size} elements as shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise DomainError("tensor contains non-finite values")
    return arr


def strides_for(shape: Sequence[int]) -> tuple[int, ...]:
    """Row-major element strides for ``shape``."""
    strides = []
    acc = 1
    for extent in reversed(shape):
        strides.append(acc)
        acc *= int(extent)
    return tuple(reversed(strides))


def flat_index(index: Sequence[int], shape: Sequence[int]) -> int:
    if len(index) != len(shape):
        raise DimensionError(f"index rank {len(index)} does not match shape rank {len(shape)}")
    for i, n in zip(index, shape):
        if not 0 <= i < n:
            raise DimensionError(f"index {tuple(index)} out of bounds for shape {tuple(shape)}")
    return sum(int(i) * s for i, s in zip(index, strides_for(shape)))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.asarray(a, dtype=ACCUM_DTYPE) @ np.asarray(b, dtype=ACCUM_DTYPE)
    return out.astype(STORAGE_DTYPE)


def reduce_moments(x) -> tuple[float, float]:
    """Mean and population variance (divide by n) of a rank-1 series."""
    x = np.asarray(x, dtype=ACCUM_DTYPE)
    if x.ndim != 1:
        raise DimensionError(f"reduce_moments expects rank-1 input, got shape {x.shape}")
    if x.size == 0:
        raise DomainError("reduce_moments of an empty series")
    mean = float(np.mean(x))
    var = float(np.mean((x - mean) ** 2))
    return mean, var


class RngStream:
    """Seeded counter-based generator (numpy Philox).

    ``split(label)`` derives an independent child stream whose seed is the
    first 64-bit word of ``SeedSequence([seed, label])``; the derivation only
    depends on the two integers, never on how much the parent was consumed.
    """

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.generator = np.random.Generator(np.random.Philox(key=seed))

    def split(self, label: int) -> "RngStream":
        child = np.random.SeedSequence([self.seed, int(label)]).generate_state(1, np.uint64)[0]
        return RngStream(int(child))

    def uniform(self, shape, lo=0.0, hi=1.0) -> np.ndarray:
        return self.generator.uniform(lo, hi, size=shape)

    def normal(self, shape, scale=1.0) -> np.ndarray:
        return self.generator.normal(0.0, scale, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def bernoulli(self, shape, p_keep: float) -> np.ndarray:
        return self.generator.random(size=shape) < p_keep

    def __repr__(self):
        return f"RngStream(seed={self.seed}, algorithm={self.algorithm!r})"


def as_rng(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    if rng is None:
        return RngStream(0)
    return RngStream(int(rng))


def seeded_uniform(rng: RngStream, shape, lo: float, hi: float) -> np.ndarray:
    """float32 samples in [lo, hi)."""
    if not lo < hi:
        raise DomainError(f"seeded_uniform needs lo < hi, got [{lo}, {hi})")
    u = rng.generator.random(size=shape)
    out = (lo + (hi - lo) * u).astype(STORAGE_DTYPE)
    # float32 rounding can land exactly on hi
    top = np.nextafter(STORAGE_DTYPE(hi), STORAGE_DTYPE(-np.inf))
    return np.clip(out, STORAGE_DTYPE(lo), top)


def checksum(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()

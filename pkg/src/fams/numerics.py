"""Dense linear algebra helpers and seeded, splittable random streams.

All arrays are float64. Random streams are backed by numpy's counter-based
Philox bit generator; a child stream is keyed by the parent's seed plus a
tuple of non-negative integers, so sub-streams for different subgroups or
epochs can be created in any order and always yield the same draws.
Normal variates come from numpy's ziggurat sampler (``Generator.standard_normal``).
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeError

__all__ = ["SeededRng", "as_matrix", "matmul", "standard_normal"]


class SeededRng:
    """Deterministic random stream identified by ``(seed, path)``.

    Two instances built from the same seed and path produce bitwise identical
    sequences. ``child`` derives an independent stream without consuming any
    state from the parent.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(seq))

    def child(self, *ids: int) -> "SeededRng":
        return SeededRng(self.seed, self.path + tuple(ids))

    def normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def uniform(self, size=None) -> np.ndarray:
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self.generator.choice(n, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, path={self.path})"


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def standard_normal(rng: SeededRng, n: int) -> np.ndarray:
    """Draw ``n`` i.i.d. N(0, 1) variates and advance ``rng``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return rng.normal(n)

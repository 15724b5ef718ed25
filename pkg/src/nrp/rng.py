"""Seeded random streams; no ambient global randomness anywhere.

Every stochastic component (init, noise, shuffling, attack restarts) draws
from an explicitly constructed ``SeededRng``.  Streams are PCG64-backed, so
the same seed reproduces the same values bit-for-bit across runs and
platforms for a fixed numpy version.
"""

from __future__ import annotations

import numpy as np


class SeededRng:
    """Deterministic random stream with derivable child streams."""

    def __init__(self, seed):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed))
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0, dtype=np.float32) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(dtype)

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (mean + std * self._gen.standard_normal(size=shape)).astype(dtype)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Integers in [low, high), matching numpy's half-open convention."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def split(self, n: int) -> list["SeededRng"]:
        """Derive n independent child streams (order of split calls matters)."""
        return [SeededRng(child) for child in self._seq.spawn(n)]

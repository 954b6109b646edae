"""Seeded random streams.

Streams are numpy ``PCG64`` generators keyed by ``SeedSequence(seed,
spawn_key=...)``; both algorithms are documented and platform independent, so
the same seed and key give the same draws everywhere.  String keys are mapped
to integers with 64-bit FNV-1a.
"""

from __future__ import annotations

import numpy as np

from moder.numerics.hashing import fnv1a_64


def _key_part(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError("stream keys must be non-negative")
        return int(k)
    return fnv1a_64(str(k).encode("utf-8"))


class SeededRng:
    """A deterministic stream plus the recipe that produced it."""

    def __init__(self, seed: int, *key):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = tuple(_key_part(k) for k in key)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self.gen = np.random.Generator(np.random.PCG64(seq))

    def child(self, *key) -> "SeededRng":
        """Independent stream for a sub-purpose; does not advance this stream."""
        return SeededRng(self.seed, *self.key, *key)

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self.gen.normal(0.0, scale, size=size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def uniform(self, size=None):
        return self.gen.random(size)

"""Purpose-keyed portable random streams.

Every stream is a PCG64 generator (numpy's bit generator, whose raw output is
stable across platforms and numpy releases) seeded through ``SeedSequence``
with the key ``(seed, purpose, epoch, index)``. Only the raw 64-bit words are
used; the mapping to floats, bounded integers, permutations and normals is
done here so that no version-dependent distribution code is involved.
"""
from __future__ import annotations

import math

import numpy as np

PURPOSES = {"init": 1, "split": 2, "shuffle": 3, "augment": 4, "subset": 5, "data": 6}

_TWO_POW_53 = float(2**53)


class Stream:
    def __init__(self, seed: int, purpose: str, epoch: int = 0, index: int = 0):
        if purpose not in PURPOSES:
            raise ValueError(f"unknown purpose tag {purpose!r}")
        self.key = (int(seed), purpose, int(epoch), int(index))
        ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, PURPOSES[purpose], int(epoch), int(index)])
        self._bg = np.random.PCG64(ss)

    def raw(self, n: int) -> np.ndarray:
        return np.asarray(self._bg.random_raw(n), dtype=np.uint64).reshape(-1)

    def uniform(self, size=1, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Floats in [low, high) built from the top 53 bits of each word."""
        n = int(np.prod(size))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) / _TWO_POW_53
        return (low + (high - low) * u).reshape(size)

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (2**64 // n) * n
        while True:
            r = int(self.raw(1)[0])
            if r < limit:
                return r % n

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        words = self.raw(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            m = i + 1
            r = int(words[k])
            limit = (2**64 // m) * m
            while r >= limit:
                r = int(self.raw(1)[0])
            j = r % m
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def normal(self, size=1, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Box-Muller normals."""
        n = int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1]
        u2 = self.uniform(m)
        rad = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([rad * np.cos(2 * math.pi * u2), rad * np.sin(2 * math.pi * u2)])[:n]
        return (mean + std * z).reshape(size)

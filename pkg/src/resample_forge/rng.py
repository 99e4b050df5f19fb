"""Counter-based, splittable random streams built on Philox.

Every stochastic routine in this package takes an explicit RngStream so
that results are reproducible bit-for-bit given a seed, and so that work
parallelized over items (cases, trajectories) can key an independent
stream off each item index regardless of scheduling order.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    """One round of splitmix64; decorrelates nearby integer keys."""
    x = (x + _GOLDEN) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class RngStream:
    """A deterministic random stream identified by (seed, path).

    `split(i, j, ...)` derives an independent child stream; children with
    distinct paths never share draws, and the same (seed, path) always
    reproduces the same sequence.
    """

    def __init__(self, seed: int, _key: int | None = None):
        self.seed = int(seed) & _MASK64
        self._key = self.seed if _key is None else _key
        self._gen = np.random.Generator(np.random.Philox(key=self._key))

    def split(self, *indices: int) -> "RngStream":
        key = self._key
        for idx in indices:
            key = _splitmix64(key ^ ((int(idx) + 1) & _MASK64))
        return RngStream(self.seed, _key=key)

    # Draw helpers delegate to the underlying generator so call sites
    # read like plain numpy.

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, n: int, size: int, p=None) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=True, p=p)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

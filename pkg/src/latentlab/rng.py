"""Seeded, counter-based pseudo-random number generation.

The generator is SplitMix64 run in counter mode: draw ``i`` of a stream with
seed ``s`` is the SplitMix64 finalizer applied to ``s + (i+1) * GOLDEN`` where
``GOLDEN = 0x9E3779B97F4A7C15`` and all arithmetic is modulo 2**64.  Because
each output depends only on (seed, counter), blocks of any size can be
produced with vectorized uint64 arithmetic and the stream is identical no
matter how the draws are batched.

Uniform doubles take the top 53 bits of each 64-bit word, giving values in
[0, 1).  Normal variates use the Box-Muller transform on consecutive uniform
pairs; a call for k normals consumes ceil(k/2) pairs and discards any spare,
so the mapping from counter positions to outputs is fixed.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_U53 = 2.0 ** -53
_MASK64 = (1 << 64) - 1


def _splitmix64(words):
    """SplitMix64 finalizer, elementwise over a uint64 array."""
    z = words
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


class Rng:
    """Deterministic random stream; one instance per experiment/run."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._base = np.uint64(self.seed & _MASK64)
        self._count = 0

    def _next_words(self, n: int) -> np.ndarray:
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        return _splitmix64(self._base + idx * _GOLDEN)

    def uniform(self, size=None):
        """Uniform doubles in [0, 1); scalar when size is None."""
        n = 1 if size is None else int(np.prod(size))
        u = (self._next_words(n) >> _S11).astype(np.float64) * _U53
        if size is None:
            return float(u[0])
        return u.reshape(size)

    def normal(self, size=None):
        """Standard normal draws via Box-Muller; scalar when size is None."""
        n = 1 if size is None else int(np.prod(size))
        pairs = (n + 1) // 2
        u1 = (self._next_words(pairs) >> _S11).astype(np.float64) * _U53
        u2 = (self._next_words(pairs) >> _S11).astype(np.float64) * _U53
        radius = np.sqrt(-2.0 * np.log1p(-u1))  # 1-u1 in (0,1], log finite
        angle = 2.0 * np.pi * u2
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]
        if size is None:
            return float(z[0])
        return z.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic shuffle of range(n) keyed on one uniform per index."""
        return np.argsort(self.uniform(int(n)), kind="stable")


def rng(seed: int = 0) -> Rng:
    """Build a deterministic generator for the given seed."""
    return Rng(seed)

"""Deterministic random source: xoshiro256++ seeded through splitmix64.

Normal draws use the basic Box-Muller transform. Bulk generation is compiled
with numba; the output stream is identical to drawing one value at a time.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

MASK64 = 0xFFFFFFFFFFFFFFFF
_TWO_PI = 2.0 * math.pi
_INV_2_53 = 1.0 / 9007199254740992.0


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step. Returns (new_state, output)."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


@njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True)
def _next(s):
    result = _rotl(s[0] + s[3], 23) + s[0]
    t = s[1] << np.uint64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


@njit(cache=True)
def _fill_u64(s, out):
    for i in range(out.shape[0]):
        out[i] = _next(s)


@njit(cache=True)
def _fill_uniform(s, out):
    # (0, 1]: never 0, so log() in Box-Muller stays finite
    for i in range(out.shape[0]):
        out[i] = (float(_next(s) >> np.uint64(11)) + 1.0) * _INV_2_53


@njit(cache=True)
def _fill_normal(s, out):
    n = out.shape[0]
    i = 0
    while i < n:
        u1 = (float(_next(s) >> np.uint64(11)) + 1.0) * _INV_2_53
        u2 = (float(_next(s) >> np.uint64(11)) + 1.0) * _INV_2_53
        r = math.sqrt(-2.0 * math.log(u1))
        out[i] = r * math.cos(_TWO_PI * u2)
        if i + 1 < n:
            out[i + 1] = r * math.sin(_TWO_PI * u2)
        i += 2


class Rng:
    """xoshiro256++ stream.

    Normal draws consume uniforms in pairs; an odd-sized request discards the
    second value of the last pair, so every call starts on a fresh pair.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & MASK64
        x = self.seed
        words = []
        for _ in range(4):
            x, z = splitmix64(x)
            words.append(z)
        self._s = np.array(words, dtype=np.uint64)

    @property
    def state(self) -> tuple[int, ...]:
        return tuple(int(w) for w in self._s)

    def next_u64(self) -> int:
        out = np.empty(1, dtype=np.uint64)
        _fill_u64(self._s, out)
        return int(out[0])

    def u64(self, n: int) -> np.ndarray:
        out = np.empty(int(n), dtype=np.uint64)
        _fill_u64(self._s, out)
        return out

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        """Uniform draws on (low, high]; a float when ``size`` is None."""
        n = 1 if size is None else int(np.prod(size))
        out = np.empty(n, dtype=np.float64)
        _fill_uniform(self._s, out)
        out = low + (high - low) * out
        if size is None:
            return float(out[0])
        return out.reshape(size)

    def gaussian(self, shape) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape))
        n = int(np.prod(shape))
        out = np.empty(n, dtype=np.float64)
        _fill_normal(self._s, out)
        return out.reshape(shape)

    def integers(self, high: int, size=None):
        """Uniform integers in [0, high)."""
        if high <= 0:
            raise ValueError(f"high must be positive, got {high}")
        if size is None:
            return int(self.u64(1)[0] % np.uint64(high))
        n = int(np.prod(size))
        return (self.u64(n) % np.uint64(high)).astype(np.int64).reshape(size)

    def geometric(self, p: float, size) -> np.ndarray:
        """Draws on {1, 2, ...} with success probability ``p`` (mean 1/p)."""
        if not 0.0 < p <= 1.0:
            raise ValueError(f"p must lie in (0, 1], got {p}")
        u = self.uniform(size=size)
        if p == 1.0:
            return np.ones(np.shape(u), dtype=np.int64)
        # inverse CDF; u in (0, 1] so log(u) <= 0
        return (np.floor(np.log(u) / math.log1p(-p)) + 1).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = np.arange(n)
        if n < 2:
            return perm
        draws = self.u64(n - 1)
        for j, i in enumerate(range(n - 1, 0, -1)):
            k = int(draws[j] % np.uint64(i + 1))
            perm[i], perm[k] = perm[k], perm[i]
        return perm

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        if replace:
            return self.integers(n, size=(size,))
        if size > n:
            raise ValueError(f"cannot take {size} of {n} without replacement")
        return self.permutation(n)[:size]

    def split(self, index: int) -> "Rng":
        """Independent child stream keyed by ``index`` (seed XOR index)."""
        return Rng(self.seed ^ (int(index) & MASK64))

    def spawn(self) -> "Rng":
        """Child stream seeded from this stream's next output."""
        return Rng(self.next_u64())

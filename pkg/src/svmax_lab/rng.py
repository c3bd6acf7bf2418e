"""Portable seeded random stream.

Algorithm: xoshiro256** (Blackman & Vigna) with its 256-bit state filled
from the seed by four splitmix64 outputs. Derived quantities:

* uniform double in [0, 1): ``(x >> 11) * 2**-53``
* normal: Box-Muller on two consecutive uniforms ``u1, u2``, yielding
  ``sqrt(-2 ln(1 - u1)) * (cos(2 pi u2), sin(2 pi u2))``; both outputs are
  used, an odd trailing output is discarded
* integer in [0, n): ``floor(uniform * n)``

The same seed therefore reproduces the same stream on any platform.
"""
import numba
import numpy as np

_MASK = (1 << 64) - 1


def _splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return x, z ^ (z >> 31)


@numba.njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@numba.njit(cache=True)
def _fill_u64(state, out):
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    for i in range(out.size):
        out[i] = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3


class Rng:
    """xoshiro256** stream. Single owner; not thread-safe."""

    def __init__(self, seed=0):
        self.seed = int(seed) & _MASK
        x = self.seed
        words = []
        for _ in range(4):
            x, z = _splitmix64(x)
            words.append(z)
        self.state = np.array(words, dtype=np.uint64)

    def next_u64(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        out = np.empty(n, dtype=np.uint64)
        _fill_u64(self.state, out)
        return int(out[0]) if size is None else out.reshape(size)

    def random(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        x = self.next_u64(n)
        u = (x >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return float(u[0]) if size is None else u.reshape(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return low + (high - low) * self.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        n = 1 if size is None else int(np.prod(size))
        pairs = (n + 1) // 2
        u = self.random(2 * pairs)
        u1, u2 = u[0::2], u[1::2]
        r = np.sqrt(-2.0 * np.log1p(-u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        z = loc + scale * z[:n]
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, n, size=None):
        u = self.random(size)
        return int(u * n) if size is None else np.floor(u * n).astype(np.int64)

    def sample(self, n, k):
        """k distinct indices from range(n), in draw order (partial Fisher-Yates)."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct items from {n}")
        pool = np.arange(n)
        u = self.random(k)
        for i in range(k):
            j = i + int(u[i] * (n - i))
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k].copy()

    def permutation(self, n):
        return self.sample(n, n)

    def spawn(self):
        """Independent child stream seeded from this one."""
        return Rng(self.next_u64())

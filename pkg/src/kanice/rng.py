"""Seeded randomness with documented stream splitting.

Every random draw in a run descends from one integer seed:

* ``derive_seed(seed, stream)`` hashes a stream name with SplitMix64 to get an
  independent 64-bit seed per purpose ("data", "init", "attack", ...).
* Data order uses :class:`Xoshiro256StarStar` (state filled by SplitMix64) and
  an in-place Fisher-Yates shuffle drawing bounded integers by rejection.
  The algorithm is fixed, so orders are identical across platforms.
* Parameter initialisation draws from ``numpy.random.Generator(PCG64(s))``
  with ``s = derive_seed(seed, "init")``.
"""
from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step: returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


class Xoshiro256StarStar:
    def __init__(self, seed: int):
        state = seed & _MASK
        s = []
        for _ in range(4):
            state, out = splitmix64(state)
            s.append(out)
        self.s = s

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & _MASK, 7) * 9) & _MASK
        t = (s[1] << 17) & _MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def permutation(self, n: int) -> np.ndarray:
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return np.array(perm, dtype=np.int64)


def derive_seed(seed: int, stream: str) -> int:
    """64-bit seed for a named stream, independent of other streams."""
    state = seed & _MASK
    for byte in stream.encode():
        state, out = splitmix64(state ^ byte)
        state ^= out
    _, out = splitmix64(state)
    return out


def numpy_rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, stream)))

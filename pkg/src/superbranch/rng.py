"""Counter-seeded xoshiro256** streams.

A stream is addressed by ``(master_seed, stream_index)``.  The four state
words come from SplitMix64 applied to a hash of the pair, so every replicate
owns an independent, reproducible sequence.  The compiled kernel implements
the same generator and samplers bit for bit; this module is the reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
TWO_M53 = 1.0 / (1 << 53)
POISSON_CHUNK = 30.0


def splitmix64_mix(z):
    z = (z + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK64


@dataclass(frozen=True)
class RngStream:
    master_seed: int
    stream_index: int = 0

    def __post_init__(self):
        if not 0 <= self.master_seed <= MASK64:
            raise ValueError("master seed must be an unsigned 64-bit integer")
        if self.stream_index < 0:
            raise ValueError("stream index must be non-negative")

    def initial_state(self):
        z = splitmix64_mix(splitmix64_mix(self.master_seed) ^ (self.stream_index & MASK64))
        z = splitmix64_mix(z ^ (self.stream_index >> 64))
        state = []
        for _ in range(4):
            z = (z + GOLDEN) & MASK64
            state.append(splitmix64_mix(z))
        if not any(state):
            state[0] = 1
        return state

    def generator(self):
        return Xoshiro256(self.initial_state())


class Xoshiro256:
    """xoshiro256** with the samplers the simulation needs."""

    __slots__ = ("s0", "s1", "s2", "s3")

    def __init__(self, state):
        self.s0, self.s1, self.s2, self.s3 = (int(v) & MASK64 for v in state)

    @property
    def state(self):
        return [self.s0, self.s1, self.s2, self.s3]

    def state_array(self):
        return np.array(self.state, dtype=np.uint64)

    def set_state(self, state):
        self.s0, self.s1, self.s2, self.s3 = (int(v) & MASK64 for v in state)

    def next64(self):
        s0, s1, s2, s3 = self.s0, self.s1, self.s2, self.s3
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s0, self.s1, self.s2, self.s3 = s0, s1, s2, s3
        return result

    def uniform(self):
        """Uniform double on [0, 1) with 53 random bits."""
        return (self.next64() >> 11) * TWO_M53

    def exponential(self, rate):
        return -math.log1p(-self.uniform()) / rate

    def below(self, n):
        """Uniform integer in [0, n) by multiply-shift on a 53-bit draw."""
        i = int(self.uniform() * n)
        return n - 1 if i >= n else i

    def poisson(self, lam):
        """Poisson variate by chunked sequential inversion (chunks of mean <= 30)."""
        total = 0
        while lam > POISSON_CHUNK:
            total += self._poisson_inversion(POISSON_CHUNK)
            lam -= POISSON_CHUNK
        if lam > 0:
            total += self._poisson_inversion(lam)
        return total

    def _poisson_inversion(self, lam):
        u = self.uniform()
        p = math.exp(-lam)
        cdf = p
        i = 0
        while u > cdf and i < 1000:
            i += 1
            p *= lam / i
            cdf += p
        return i

    def categorical(self, cdf, n):
        """Index drawn from a cumulative table ``cdf[0:n]`` (last entry is the total)."""
        u = self.uniform() * cdf[n - 1]
        for i in range(n - 1):
            if u < cdf[i]:
                return i
        return n - 1

"""Deterministic xorshift64* random stream.

Every random draw in the package (reference-model weights, SmoothGrad
noise, LIME feature sampling, seeded benchmark inputs, k-means init)
flows through this generator so results reproduce bit-exactly across
platforms and languages.

Stream definition, for anyone re-implementing it elsewhere:

    state <- seed (64-bit; a seed of 0 is remapped to 0x9E3779B97F4A7C15)
    step:  x ^= x >> 12;  x ^= x << 25;  x ^= x >> 27;  state <- x
           output = (x * 0x2545F4914F6CDD1D) mod 2^64
    uniform [0,1): top 53 bits of output, scaled by 2^-53
    gaussian: Box-Muller cosine branch from two consecutive uniforms,
              u1 in (0,1] (bits+1 scaled), u2 in [0,1)
    bit: top bit of output
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_MULT = 0x2545F4914F6CDD1D
_ZERO_SEED = 0x9E3779B97F4A7C15


class XorShift64Star:
    def __init__(self, seed: int):
        self._state = (seed & _MASK64) or _ZERO_SEED

    def next_u64(self) -> int:
        x = self._state
        x ^= x >> 12
        x ^= (x << 25) & _MASK64
        x ^= x >> 27
        self._state = x
        return (x * _MULT) & _MASK64

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * 2.0**-53
        return lo + u * (hi - lo)

    def bit(self) -> int:
        return self.next_u64() >> 63

    def gauss(self, sigma: float = 1.0) -> float:
        u1 = ((self.next_u64() >> 11) + 1) * 2.0**-53
        u2 = (self.next_u64() >> 11) * 2.0**-53
        return sigma * math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def fill_uniform(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        return np.array([self.uniform(lo, hi) for _ in range(n)], dtype=np.float64)

    def fill_gauss(self, n: int, sigma: float = 1.0) -> np.ndarray:
        return np.array([self.gauss(sigma) for _ in range(n)], dtype=np.float64)

    def fill_bits(self, n: int) -> np.ndarray:
        return np.array([self.bit() for _ in range(n)], dtype=np.int64)

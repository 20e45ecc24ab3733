"""Deterministic 64-bit PRNG (xoshiro256**) and seed-derivation helpers.

Every random choice in the pipeline (weight init, shuffles, corpus jitter,
frame sampling) flows through this generator so that artifacts are
reproducible byte-for-byte from a single master seed, independent of the
interpreter's hash randomization or the installed numpy version.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _mix64(z: int) -> int:
    # splitmix64 finalizer
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK
    return h


def derive_seed(master: int, name: str) -> int:
    """Fan a master seed out to an independent per-purpose seed.

    Rule (documented, stable): seed = mix64(master XOR fnv1a64(name)), where
    mix64 is the splitmix64 finalizer. Same rule everywhere; never ad hoc.
    """
    return _mix64((master ^ fnv1a64(name.encode("utf-8"))) & _MASK)


def derive_index_seed(master: int, index: int) -> int:
    """Per-item seed for order-independent (parallelizable) generation."""
    return _mix64((master ^ ((index * 0x9E3779B97F4A7C15) & _MASK)) & _MASK)


class Xoshiro256:
    """xoshiro256** generator. State seeded through a splitmix64 stream."""

    __slots__ = ("_s",)

    def __init__(self, seed: int):
        seed &= _MASK
        s = []
        x = seed
        for _ in range(4):
            x = (x + 0x9E3779B97F4A7C15) & _MASK
            s.append(_mix64(x))
        if not any(s):  # all-zero state is the one forbidden state
            s[0] = 1
        self._s = s

    def next64(self) -> int:
        s = self._s
        s1 = s[1]
        x = (s1 * 5) & _MASK
        result = (((x << 7) | (x >> 57)) & _MASK) * 9 & _MASK
        t = (s1 << 17) & _MASK
        s[2] ^= s[0]
        s[3] ^= s1
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s3 = s[3]
        s[3] = ((s3 << 45) | (s3 >> 19)) & _MASK
        return result

    def random(self) -> float:
        """Uniform in [0, 1) with 53 bits of precision."""
        return (self.next64() >> 11) * 2.0**-53

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection."""
        if n <= 0:
            raise ValueError("randbelow() requires n >= 1")
        limit = _MASK + 1 - ((_MASK + 1) % n)
        while True:
            r = self.next64()
            if r < limit:
                return r % n

    def uniforms(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        nxt = self.next64
        for i in range(n):
            out[i] = (nxt() >> 11) * 2.0**-53
        return out

    def normals(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller (pairs; trailing odd value kept)."""
        out = np.empty(n, dtype=np.float64)
        i = 0
        while i < n:
            # u1 in (0, 1] so log() is finite
            u1 = ((self.next64() >> 11) + 1) * 2.0**-53
            u2 = (self.next64() >> 11) * 2.0**-53
            r = math.sqrt(-2.0 * math.log(u1))
            a = 2.0 * math.pi * u2
            out[i] = r * math.cos(a)
            i += 1
            if i < n:
                out[i] = r * math.sin(a)
                i += 1
        return out

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

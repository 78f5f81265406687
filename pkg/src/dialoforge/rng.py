"""Deterministic random primitives used everywhere randomness is needed.

The generator is SplitMix64, chosen because it is tiny and exactly specified,
so a reimplementation in any language reproduces identical streams:

    state    <- (state + 0x9E3779B97F4A7C15) mod 2^64
    z        <- state
    z        <- (z XOR (z >> 30)) * 0xBF58476D1CE4E5B9   mod 2^64
    z        <- (z XOR (z >> 27)) * 0x94D049BB133111EB   mod 2^64
    output   <- z XOR (z >> 31)

``uniform()`` maps one 64-bit output to [0, 1) via the top 53 bits divided
by 2^53. Every draw consumes exactly one generator step.
"""

from __future__ import annotations

import hashlib

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class SplitMix64:
    """Counter-based 64-bit generator; one output word per step."""

    __slots__ = ("state", "draws")

    def __init__(self, seed: int):
        self.state = seed & _MASK64
        self.draws = 0

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        self.draws += 1
        return (z ^ (z >> 31)) & _MASK64

    def uniform(self) -> float:
        """One draw from Uniform[0, 1) with 53-bit resolution."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def uniform_in(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def randint(self, n: int) -> int:
        """One draw from {0, ..., n-1} (floor of a scaled uniform)."""
        if n <= 0:
            raise ValueError("randint requires n >= 1")
        return min(int(self.uniform() * n), n - 1)

    def choice(self, seq):
        return seq[self.randint(len(seq))]

    def gaussian_pair(self) -> tuple[float, float]:
        """Two standard normals via Box-Muller (consumes two draws)."""
        import math

        u1 = self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(max(u1, 2.0 ** -53)))
        return r * math.cos(2.0 * math.pi * u2), r * math.sin(2.0 * math.pi * u2)


def derive_seed(*parts: object) -> int:
    """Collapse labelled parts into a 64-bit child seed.

    SHA-256 over the '/'-joined string forms of ``parts``; the first eight
    bytes (big-endian) become the seed. Stable across platforms and runs.
    """
    text = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def stable_hash64(data: bytes, seed: int = 0) -> int:
    """64-bit content hash (SHA-256 based), independent of PYTHONHASHSEED."""
    digest = hashlib.sha256(seed.to_bytes(8, "big") + data).digest()
    return int.from_bytes(digest[:8], "big")

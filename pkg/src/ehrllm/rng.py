"""Portable seeded random numbers.

SplitMix64 (Steele, Lea & Flood 2014) is used everywhere a seed is accepted so
that cohort sampling and synthetic dates reproduce bit-for-bit on any platform
and in any language that follows the same recipe:

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)

all arithmetic modulo 2**64. Bounded integers use rejection sampling on the
top of the 64-bit range so there is no modulo bias.
"""

from __future__ import annotations

_MASK = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)``."""
        if n <= 0:
            raise ValueError(f"upper bound must be positive, got {n}")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def integer(self, lo: int, hi: int) -> int:
        """Uniform integer in ``[lo, hi]`` inclusive."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + self.below(hi - lo + 1)

    def sample_indices(self, population: int, k: int) -> list[int]:
        """``k`` distinct indices from ``range(population)``, ascending.

        Partial Fisher-Yates over the index list; the chosen prefix is sorted
        so callers keep source order.
        """
        k = min(k, population)
        idx = list(range(population))
        for i in range(k):
            j = i + self.below(population - i)
            idx[i], idx[j] = idx[j], idx[i]
        return sorted(idx[:k])

    def choice(self, items):
        return items[self.below(len(items))]


def derive_seed(seed: int, *parts: int | str) -> int:
    """Mix extra labels into a seed so sub-streams are independent of call order."""
    rng = SplitMix64(seed)
    out = rng.next_u64()
    for part in parts:
        if isinstance(part, str):
            for byte in part.encode("utf-8"):
                out = SplitMix64(out ^ byte).next_u64()
        else:
            out = SplitMix64(out ^ (part & _MASK)).next_u64()
    return out

"""Small integer random generators with explicit, portable state.

Everything that must replay bit-exactly (world generation, cow motion, oracle
noise, dataset sampling) draws from ``XorShift64Star`` so results never depend
on the platform's float behaviour or on numpy's generator version.
"""

from __future__ import annotations

import hashlib

MASK64 = (1 << 64) - 1
_MULT = 0x2545F4914F6CDD1D
_TWO53 = 1 << 53


def splitmix64(x: int) -> int:
    """One SplitMix64 output for input ``x``; used to spread seeds."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(*keys: int | str) -> int:
    """Deterministic 64-bit seed from a tuple of ints/strings."""
    acc = 0x6A09E667F3BCC908
    for key in keys:
        if isinstance(key, str):
            key = int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little")
        acc = splitmix64(acc ^ (int(key) & MASK64))
    return acc


class XorShift64Star:
    """xorshift64* generator. ``state`` is a plain int and is never zero."""

    __slots__ = ("state",)

    def __init__(self, seed: int = 0, *, state: int | None = None):
        if state is not None:
            if not 0 < state <= MASK64:
                raise ValueError("xorshift state must be a non-zero 64-bit integer")
            self.state = state
        else:
            self.state = splitmix64(seed & MASK64) or 0x1

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * _MULT) & MASK64

    def below(self, n: int) -> int:
        """Integer in ``[0, n)`` via the multiply-high reduction."""
        if n <= 0:
            raise ValueError("n must be positive")
        return (self.next_u64() * n) >> 64

    def chance(self, p: float) -> bool:
        """True with probability ``p``; integer comparison on 53 bits."""
        if p <= 0.0:
            return False
        if p >= 1.0:
            return True
        return (self.next_u64() >> 11) < int(p * _TWO53)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) / _TWO53

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def choice(self, items):
        return items[self.below(len(items))]

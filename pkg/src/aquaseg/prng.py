"""Deterministic random streams: a splitmix64-seeded xoshiro256++ generator.

Implemented with plain integer arithmetic so the same 64-bit seed yields the
same sample sequence on every platform, independent of numpy's own generator
versioning. Bulk draws go through :meth:`PrngState.fill_u64`, which runs the
state update in a tight Python loop and hands the block to numpy afterwards;
adequate for weight init and desk-scale scene synthesis, not for gigasample
workloads.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
_INV_2_53 = 2.0 ** -53


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    """64-bit FNV-1a hash, used to derive named substreams from one seed."""
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK
    return h


class PrngState:
    """xoshiro256++ stream whose four state words come from splitmix64(seed)."""

    __slots__ = ("seed", "_s")

    def __init__(self, seed: int):
        self.seed = seed & _MASK
        sm = self.seed
        words = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            words.append(out)
        self._s = words

    def derive(self, label: str) -> "PrngState":
        """Child stream keyed by ``label``.

        Derivation depends only on the original seed, never on how far this
        stream has advanced, so independently created streams line up.
        """
        return PrngState(splitmix64(self.seed ^ fnv1a64(label))[1])

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        x = (s0 + s3) & _MASK
        result = ((((x << 23) & _MASK) | (x >> 41)) + s0) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) & _MASK) | (s3 >> 19)
        self._s = [s0, s1, s2, s3]
        return result

    def fill_u64(self, n: int) -> np.ndarray:
        """Next ``n`` raw draws as a uint64 array."""
        s0, s1, s2, s3 = self._s
        mask = _MASK
        buf = [0] * n
        for i in range(n):
            x = (s0 + s3) & mask
            buf[i] = ((((x << 23) & mask) | (x >> 41)) + s0) & mask
            t = (s1 << 17) & mask
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = ((s3 << 45) & mask) | (s3 >> 19)
        self._s = [s0, s1, s2, s3]
        return np.array(buf, dtype=np.uint64)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 samples in [0, 1) with 53-bit resolution."""
        return (self.fill_u64(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def uniform_range(self, lo: float, hi: float, n: int) -> np.ndarray:
        return lo + (hi - lo) * self.uniform(n)

    def normal(self, n: int) -> np.ndarray:
        """``n`` standard-normal samples via Box-Muller."""
        pairs = (n + 1) // 2
        u1 = np.maximum(self.uniform(pairs), _INV_2_53)
        u2 = self.uniform(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return out[:n]

    def randbelow(self, n: int) -> int:
        """Integer in [0, n). Uses the modulo map; the tiny bias is irrelevant
        for shuffling and keeps the draw count fixed at one per call."""
        if n <= 0:
            raise ValueError("randbelow needs a positive bound")
        return self.next_u64() % n

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] inclusive."""
        return lo + self.randbelow(hi - lo + 1)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

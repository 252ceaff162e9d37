"""Deterministic 64-bit LCG used for artifact generation and synthetic prompts.

Multiplier/increment are the classic PCG-LCG constants. The stream is pure
integer arithmetic mod 2**64, so it is bit-exact on every platform; float
outputs are derived from the top 53 bits only.
"""

from __future__ import annotations

import numpy as np

MULTIPLIER = 6364136223846793005
INCREMENT = 1442695040888963407
_MASK = (1 << 64) - 1


class Lcg64:
    """Sequential 64-bit linear congruential generator, seeded directly."""

    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (MULTIPLIER * self.state + INCREMENT) & _MASK
        return self.state

    def next_unit(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform_f32(self, lo: float, hi: float) -> np.float32:
        return np.float32(lo + (hi - lo) * self.next_unit())

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection-free scaling of the unit draw."""
        return int(self.next_unit() * n)

    def token_ids(self, count: int, vocab_size: int, exclude: int | None = None) -> list[int]:
        out = []
        while len(out) < count:
            t = self.randint(vocab_size)
            if exclude is not None and t == exclude:
                continue
            out.append(t)
        return out

    def uniform_f32_block(self, count: int, lo: float, hi: float) -> np.ndarray:
        """Vectorized draw of `count` f32 values, identical to `count` scalar draws.

        States are computed in closed form: s_k = a^k s_0 + (sum_{j<k} a^j) c,
        all mod 2**64, which numpy uint64 wrap-around arithmetic gives exactly.
        """
        if count == 0:
            return np.empty(0, dtype=np.float32)
        with np.errstate(over="ignore"):
            a = np.uint64(MULTIPLIER)
            powers = np.empty(count, dtype=np.uint64)
            powers[0] = a
            if count > 1:
                np.cumprod(np.full(count, a, dtype=np.uint64), out=powers)
            geom = np.empty(count, dtype=np.uint64)  # sum_{j<k} a^j for k = 1..count
            geom[0] = np.uint64(1)
            if count > 1:
                np.cumsum(powers[:-1] + np.uint64(0), out=geom[1:])
                geom[1:] += np.uint64(1)
            states = powers * np.uint64(self.state) + geom * np.uint64(INCREMENT)
        self.state = int(states[-1])
        unit = (states >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (lo + (hi - lo) * unit).astype(np.float32)

"""Affine masks for the maximum computation and the seeded shuffle.

A value m known to the server only as an encryption of m is masked as
(Delta m + r1) r2 with r1 < t1, 0 < r2 < t2. The map is increasing in m, so
the CSP can take the maximum of masked values without learning them.
In slot units the ciphertext holds m, so the server adds r1/Delta and
multiplies by r2.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import sympy

MASK_SCALE = 2.0**30


@lru_cache(maxsize=None)
def mask_moduli(bits1: int = 50, bits2: int = 25) -> tuple[int, int]:
    """Largest primes below 2^bits1 and 2^bits2."""
    return int(sympy.prevprime(2**bits1)), int(sympy.prevprime(2**bits2))


@dataclass(frozen=True)
class MaskPair:
    r1: int
    r2: int
    t1: int
    t2: int
    delta: float = MASK_SCALE

    def __post_init__(self):
        if not 0 <= self.r1 < self.t1:
            raise ValueError("r1 must lie in [0, t1)")
        if not 0 < self.r2 < self.t2:
            raise ValueError("r2 must lie in (0, t2)")

    def admits(self, m: float) -> bool:
        """Delta m < t1, the condition for the masked value to look uniform."""
        return 0 <= self.delta * m < self.t1

    def mask_int(self, v: int) -> int:
        """(v + r1) r2 on an already-scaled integer value."""
        return (v + self.r1) * self.r2

    def unmask_int(self, M: int) -> int:
        return M // self.r2 - self.r1


def draw_mask(rng: np.random.Generator, t1: int | None = None, t2: int | None = None,
              delta: float = MASK_SCALE) -> MaskPair:
    if t1 is None or t2 is None:
        t1, t2 = mask_moduli()
    r1 = int(rng.integers(0, t1))
    r2 = int(rng.integers(1, t2))
    return MaskPair(r1, r2, t1, t2, delta)


def fisher_yates(n: int, rng: np.random.Generator) -> list[int]:
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm

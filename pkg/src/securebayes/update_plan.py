"""Slot layout and per-iteration constants of the encrypted update.

Shared by the server and the cleartext parity sampler so that both compute the
same weights, coefficients and noise offsets bit for bit.

Layout: the gradient of iteration t lives in block ``t mod r`` of the slot
vector, each block ``d_pad`` slots wide, where ``d_pad`` is the next power of
two >= d and ``r = slots / d_pad``. Power-of-two blocks let power-of-two
rotations fold any run of consecutive blocks into one.

Scaling: with kappa = eta_t N / (2K) the update is
``theta - (ct_g + p_t) * (kappa * G)`` where ``p_t = ((eta_t/2) prior' - eta'_t z) / kappa``.
The variance weights carry an extra factor ``beta`` chosen so that the
polynomial for ``kappa * G`` in ``U = beta * K^2 * V`` has leading coefficient
exactly one; that removes two scalar products from every iteration.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

WINDOW = 219


@dataclass(frozen=True)
class BlockLayout:
    slots: int
    d: int
    # derived once; the server reads them several hundred times per iteration
    d_pad: int = field(init=False, repr=False, compare=False)
    blocks: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        d_pad = 1 << max(0, (self.d - 1).bit_length())
        object.__setattr__(self, "d_pad", d_pad)
        object.__setattr__(self, "blocks", self.slots // d_pad)

    def block_of(self, t: int) -> int:
        return t % self.blocks

    def place(self, values: np.ndarray, t: int) -> np.ndarray:
        """Slot vector with ``values`` in the block of iteration ``t`` and zeros elsewhere."""
        if self.d_pad > self.slots:
            raise ValueError(f"d={self.d} does not fit in {self.slots} slots")
        out = np.zeros(self.slots)
        start = self.block_of(t) * self.d_pad
        out[start : start + self.d] = values
        return out

    def read(self, slots: np.ndarray, t: int) -> np.ndarray:
        start = self.block_of(t) * self.d_pad
        return np.asarray(slots[start : start + self.d])

    def window(self, t: int, W: int = WINDOW) -> int:
        return min(t, W)

    def fold_rounds(self, t: int, W: int = WINDOW) -> int:
        w = self.window(t, W)
        return min(math.ceil(math.log2(w)) if w > 1 else 0, int(math.log2(self.blocks)))

    def groups(self, t: int, W: int = WINDOW) -> list[list[int]]:
        """Iterations of the window split into runs of ``blocks`` consecutive iterations, newest first."""
        lo = t - self.window(t, W) + 1
        out = []
        hi = t
        while hi >= lo:
            start = max(lo, hi - self.blocks + 1)
            out.append(list(range(start, hi + 1)))
            hi = start - 1
        return out


def variance_weight(t: int, i: int, alpha: float, beta: float) -> float:
    return beta * (alpha ** (t - i)) * (1.0 - alpha)


def weight_vector(layout: BlockLayout, t: int, group: list[int], alpha: float, beta: float) -> np.ndarray:
    w = np.zeros((layout.blocks, layout.d_pad))
    idx = np.array([layout.block_of(i) for i in group], dtype=np.int64)
    w[idx] = np.array([variance_weight(t, i, alpha, beta) for i in group])[:, None]
    return w.reshape(-1)


@dataclass(frozen=True)
class IterationConstants:
    eta: float
    eta_prime: float
    kappa: float
    beta: float
    coeffs: tuple[float, ...]


def iteration_constants(eta: float, lam: float, L: float, N: int, K: int,
                        site_coeffs: np.ndarray) -> IterationConstants:
    """Scale factors and monic coefficients for one iteration.

    ``site_coeffs`` are the preconditioner coefficients already divided by K^(2j).
    """
    eta_prime = math.sqrt((lam + L) * eta)
    kappa = eta * N / (2.0 * K)
    degree = len(site_coeffs) - 1
    lead = kappa * float(site_coeffs[degree])
    beta = math.copysign(abs(lead) ** (1.0 / degree), lead)
    coeffs = [kappa * float(site_coeffs[j]) / beta**j for j in range(degree)]
    coeffs.append(1.0)
    return IterationConstants(eta, eta_prime, kappa, beta, tuple(coeffs))


def update_offset(consts: IterationConstants, prior_nll_grad: np.ndarray, z: np.ndarray) -> np.ndarray:
    """p_t = ((eta/2) prior' - eta' z) / kappa."""
    return ((consts.eta / 2.0) * prior_nll_grad - consts.eta_prime * z) / consts.kappa

"""Canonical-embedding transform between real slot vectors and ring coefficients.

Slot ``j`` holds the evaluation of the message polynomial at ``zeta**(5**j)``
with ``zeta = exp(i*pi/n)``. Writing every odd exponent as ``2k+1`` turns all
``n`` evaluations into one length-``n`` DFT of ``m_c * zeta**c``.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import EncodeError


@lru_cache(maxsize=8)
def _tables(n: int):
    slots = n // 2
    rot_group = np.empty(slots, dtype=np.int64)
    g = 1
    for j in range(slots):
        rot_group[j] = g
        g = g * 5 % (2 * n)
    pos = (rot_group - 1) // 2
    conj_pos = (2 * n - rot_group - 1) // 2
    twist = np.exp(1j * np.pi * np.arange(n) / n)
    return pos, conj_pos, twist


def slots_to_coeffs(values: np.ndarray, n: int) -> np.ndarray:
    """Real coefficient vector ``m`` (length n) whose slots equal ``values``."""
    pos, conj_pos, twist = _tables(n)
    z = np.zeros(n, dtype=np.complex128)
    z[pos] = values
    z[conj_pos] = np.conj(values)
    y = np.fft.fft(z) / n
    return (y * np.conj(twist)).real


def coeffs_to_slots(coeffs: np.ndarray, n: int) -> np.ndarray:
    """Slot values (real parts) of the polynomial with real coefficients ``coeffs``."""
    pos, _, twist = _tables(n)
    z = n * np.fft.ifft(np.asarray(coeffs, dtype=np.float64) * twist)
    return z[pos].real


def galois_element(steps: int, n: int) -> int:
    """Exponent g with X -> X**g rotating slots left by ``steps``."""
    slots = n // 2
    return pow(5, steps % slots, 2 * n)


def pad_slots(values, slots: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size > slots:
        raise EncodeError(f"{v.size} values do not fit in {slots} slots")
    if v.size < slots:
        v = np.concatenate([v, np.zeros(slots - v.size)])
    return v

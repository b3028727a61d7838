"""Cleartext stand-in for the lattice backend.

Ciphertexts carry their slot values as float64 arrays together with the same
level/scale metadata the lattice backend tracks, so every alignment, depth and
key error fires identically. Zero-mean Gaussian noise is injected at encryption,
rescale and key switching; ``noise_std=0`` gives the exact oracle mode in which
each homomorphic op is a single float64 op per slot.
"""
from __future__ import annotations

import logging
import math
from typing import Iterable

import numpy as np

from .backend import (
    Ciphertext,
    EvalKeys,
    HeBackend,
    KeyTrio,
    Plaintext,
    PublicKey,
    SecretKey,
    default_rotation_steps,
)
from .encoding import pad_slots
from .errors import EncodeError, HeKeyError
from .params import HeParams

# roughly the fresh-encryption error of the lattice backend at scale 2**45
DEFAULT_NOISE_STD = 1e-9
# unit normals drawn once per backend, in multiples of the slot count
NOISE_POOL_FACTOR = 64

log = logging.getLogger(__name__)


class MockBackend(HeBackend):
    name = "mock"

    def __init__(self, params: HeParams, seed: int | None = None, noise_std: float = DEFAULT_NOISE_STD,
                 debug: bool = True):
        super().__init__(params, seed)
        self.noise_std = float(noise_std)
        self.debug = debug
        self.range_flags: list[dict] = []
        self._pool: np.ndarray | None = None

    @property
    def exact(self) -> bool:
        return self.noise_std == 0.0

    def _noise(self, size: int) -> np.ndarray | None:
        if self.noise_std == 0.0:
            return None
        # each draw is a slice of a fixed unit-normal pool at a random offset and sign:
        # marginally N(0, std^2) per slot, far cheaper than fresh draws per op
        with self._rng_lock:
            if self._pool is None or self._pool.size < 2 * size:
                n = max(NOISE_POOL_FACTOR * self.params.slots, 2 * size)
                self._pool = self._rng.standard_normal(n)
            off, sign = self._rng.integers(0, self._pool.size - size + 1), self._rng.integers(0, 2)
        z = self._pool[off:off + size] * self.noise_std
        return z if sign else -z

    def _noisy(self, v: np.ndarray) -> np.ndarray:
        z = self._noise(v.size)
        return v if z is None else v + z

    def generate_keys(self, rotation_steps: Iterable[int] | None = None) -> KeyTrio:
        with self._rng_lock:
            tag = int(self._rng.integers(1, 2**62))
        if rotation_steps is None:
            rotation_steps = default_rotation_steps(self.params)
        steps = {int(k): True for k in rotation_steps if int(k) % self.params.slots}
        return KeyTrio(SecretKey(None, tag), PublicKey(None, tag), EvalKeys(None, steps, tag))

    def encode(self, values, scale=None, level=None) -> Plaintext:
        scale = float(scale or self.params.scale)
        level = self.params.max_level if level is None else int(level)
        v = pad_slots(values, self.params.slots).copy()
        peak = np.max(np.abs(v), initial=0.0) * scale
        if peak > 0 and math.log2(peak) + 1 >= math.log2(self.params.modulus_at(level)):
            raise EncodeError(f"|v|*scale = 2^{math.log2(peak):.1f} exceeds the modulus at level {level}")
        return Plaintext(v, level, scale)

    def decode(self, pt: Plaintext) -> np.ndarray:
        return np.array(pt.data, dtype=np.float64)

    def _encrypt(self, pt, pk):
        return Ciphertext(self._noisy(pt.data.copy()), pt.level, pt.scale, pk.tag)

    def _decrypt(self, ct, sk):
        if sk.tag != ct.key_tag:
            # decrypting under the wrong key yields values spread over the modulus
            with self._rng_lock:
                bound = float(self.params.modulus_at(ct.level)) / (2.0 * ct.scale)
                garbage = self._rng.uniform(-bound, bound, self.params.slots)
            return Plaintext(garbage, ct.level, ct.scale)
        return Plaintext(ct.data.copy(), ct.level, ct.scale)

    def _with(self, ct, data, **kw):
        fields = dict(level=ct.level, scale=ct.scale, key_tag=ct.key_tag, needs_rescale=ct.needs_rescale)
        fields.update(kw)
        return Ciphertext(data, **fields)

    def _add(self, a, b, sign):
        data = a.data + b.data if sign > 0 else a.data - b.data
        return self._with(a, data, needs_rescale=a.needs_rescale or b.needs_rescale)

    def add_many(self, cts: list[Ciphertext]) -> Ciphertext:
        """Left-to-right sum accumulated in place; same slot values and op count as repeated add."""
        head = cts[0]
        for ct in cts[1:]:
            self._check_pair(head, ct)
        self.counter.bump("add", len(cts) - 1)
        if len(cts) == 1:
            return head
        acc = head.data + cts[1].data
        for ct in cts[2:]:
            acc += ct.data
        return self._with(head, acc, needs_rescale=any(ct.needs_rescale for ct in cts))

    def _add_plain(self, ct, pt, sign):
        return self._with(ct, ct.data + pt.data if sign > 0 else ct.data - pt.data)

    def _add_const(self, ct, c):
        return self._with(ct, ct.data + c)

    def negate(self, ct):
        return self._with(ct, -ct.data)

    def _multiply(self, a, b, evk):
        return self._with(a, self._noisy(a.data * b.data), scale=a.scale * b.scale, needs_rescale=True)

    def _multiply_plain(self, ct, pt):
        return self._with(ct, ct.data * pt.data, scale=ct.scale * pt.scale, needs_rescale=True)

    def _scalar_mult(self, ct, c, scale):
        return self._with(ct, ct.data * c, scale=ct.scale * scale, needs_rescale=True)

    def _rescale(self, ct):
        q = self.params.moduli[ct.level]
        return self._with(ct, self._noisy(ct.data), level=ct.level - 1, scale=ct.scale / q, needs_rescale=False)

    def _drop_level(self, ct, level):
        return self._with(ct, ct.data, level=level)

    def _rotate_one(self, ct, steps, evk):
        if steps not in evk.rotations:
            raise HeKeyError(f"no rotation key for step {steps}")
        return self._with(ct, self._noisy(np.roll(ct.data, -steps)))

    def debug_peek(self, ct: Ciphertext) -> np.ndarray | None:
        return ct.data.copy() if self.debug else None

    def range_check(self, ct: Ciphertext, lo: float, hi: float, label: str, scale_by: float = 1.0,
                    index=None) -> bool:
        """Flag slots of ``ct / scale_by`` (optionally only ``index``) outside ``[lo, hi]``.

        Returns True when every checked slot is inside.
        """
        vals = self.debug_peek(ct)
        if vals is None:
            return True
        vals = vals / scale_by
        if index is not None:
            vals = vals[index]
        bad = np.flatnonzero((vals < lo) | (vals > hi))
        if bad.size:
            flag = {"label": label, "count": int(bad.size), "min": float(vals.min()), "max": float(vals.max())}
            self.range_flags.append(flag)
            log.debug("%s: %d slots outside [%g, %g]", label, bad.size, lo, hi)
            return False
        return True

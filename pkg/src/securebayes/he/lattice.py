"""RNS-CKKS lattice backend.

Polynomials live in NTT form as ``(limbs, n)`` uint64 arrays, one row per chain
prime. Key switching uses one special prime ``P``: the input is split into its
per-prime residues, each residue is multiplied by a key component encrypting
``P * g_i * s'`` under ``s`` modulo ``P*Q``, and the sum is divided by ``P``.
Keys generated at the top level serve every lower level because the CRT gadget
``g_i`` reduces to the Kronecker delta modulo each chain prime.

Not production-secure: no constant-time arithmetic, seeded PRNG.
"""
from __future__ import annotations

import math
from functools import cached_property
from typing import Iterable

import numpy as np

from . import kernels
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
from .encoding import coeffs_to_slots, galois_element, pad_slots, slots_to_coeffs
from .errors import EncodeError, HeKeyError
from .params import HeParams, _bit_reverse

_INT64_SAFE = float(2**62)

# Max absolute slot error for inputs in [-1, 1] at scale 2^45 and n <= 2^14, about 30x the
# worst value measured over random vectors at n = 2^12 and 2^14 (2e-12, 7e-9, 1e-8, 8e-9, 7e-8).
# "chain" is relative error after squaring through every level (measured 3e-7).
ERROR_BUDGETS = {"encode": 2.0**-30, "encrypt": 2e-7, "add": 4e-7, "multiply": 4e-7, "rotate": 2e-6,
                 "chain": 1e-5}


class LatticeBackend(HeBackend):
    name = "lattice"

    def __init__(self, params: HeParams, seed: int | None = None):
        super().__init__(params, seed)
        self.tables = params.tables
        self.n = params.ring_dim
        self.L = params.max_level
        self.q_all = self.tables.moduli  # chain primes then P
        self.q_int = [int(q) for q in self.q_all]
        self.P = int(params.special_modulus)
        self.p_row = self.L + 1
        self.P_mod = np.array([self.P % q for q in self.q_int[: self.L + 1]], dtype=np.uint64)
        self.P_inv = np.array([pow(self.P, -1, q) for q in self.q_int[: self.L + 1]], dtype=np.uint64)

    # row helpers ----------------------------------------------------------
    def _rows(self, level: int, special: bool = False) -> np.ndarray:
        r = list(range(level + 1))
        if special:
            r.append(self.p_row)
        return np.array(r)

    def _ntt(self, a: np.ndarray, rows: np.ndarray) -> np.ndarray:
        tb = self.tables
        return kernels.ntt_forward_rows(a, self.q_all[rows], np.ascontiguousarray(tb.psi_rev[rows]))

    def _intt(self, a: np.ndarray, rows: np.ndarray) -> np.ndarray:
        tb = self.tables
        return kernels.ntt_inverse_rows(
            a, self.q_all[rows], np.ascontiguousarray(tb.psi_inv_rev[rows]), tb.n_inv[rows]
        )

    def _mul(self, a: np.ndarray, b: np.ndarray, rows: np.ndarray) -> np.ndarray:
        return kernels.mulmod_rows(a, b, self.q_all[rows])

    def _addm(self, a: np.ndarray, b: np.ndarray, rows: np.ndarray) -> np.ndarray:
        q = self.q_all[rows][:, None]
        s = a + b
        return np.where(s >= q, s - q, s)

    def _subm(self, a: np.ndarray, b: np.ndarray, rows: np.ndarray) -> np.ndarray:
        q = self.q_all[rows][:, None]
        return np.where(a >= b, a - b, a + q - b)

    def _small_to_rows(self, v: np.ndarray, rows: np.ndarray, ntt: bool = True) -> np.ndarray:
        """Signed int64 coefficients (|v| < 2**62) to residues, optionally in NTT form."""
        q = self.q_all[rows].astype(np.int64)[:, None]
        out = np.mod(v[None, :].astype(np.int64), q).astype(np.uint64)
        return self._ntt(out, rows) if ntt else out

    def _uniform(self, rows: np.ndarray) -> np.ndarray:
        with self._rng_lock:
            return np.stack([self._rng.integers(0, self.q_int[r], self.n, dtype=np.uint64) for r in rows])

    def _gaussian(self) -> np.ndarray:
        with self._rng_lock:
            return np.rint(self._rng.normal(0.0, self.params.sigma, self.n)).astype(np.int64)

    def _ternary(self) -> np.ndarray:
        with self._rng_lock:
            return self._rng.integers(-1, 2, self.n).astype(np.int64)

    @cached_property
    def _slot_index(self) -> np.ndarray:
        bits = self.n.bit_length() - 1
        return np.array([2 * _bit_reverse(j, bits) + 1 for j in range(self.n)], dtype=np.int64)

    def _galois_perm(self, g: int) -> np.ndarray:
        """NTT-domain permutation realizing X -> X**g."""
        idx = self._slot_index
        where = np.empty(2 * self.n, dtype=np.int64)
        where[idx] = np.arange(self.n)
        return where[(idx * g) % (2 * self.n)]

    # keys -------------------------------------------------------------------
    def generate_keys(self, rotation_steps: Iterable[int] | None = None) -> KeyTrio:
        full = self._rows(self.L, special=True)
        with self._rng_lock:
            tag = int(self._rng.integers(1, 2**62))
        s = self._small_to_rows(self._ternary(), full)
        top = self._rows(self.L)
        a = self._uniform(top)
        e = self._small_to_rows(self._gaussian(), top)
        b = self._subm(e, self._mul(a, s[: self.L + 1], top), top)
        sk = SecretKey(s, tag)
        pk = PublicKey((b, a), tag)
        relin = self._switch_key(self._mul(s, s, full), s)
        if rotation_steps is None:
            rotation_steps = default_rotation_steps(self.params)
        rots = {}
        for step in sorted(set(int(k) for k in rotation_steps)):
            if step % self.params.slots == 0:
                continue
            perm = self._galois_perm(galois_element(step, self.n))
            rots[step] = self._switch_key(np.ascontiguousarray(s[:, perm]), s)
        return KeyTrio(sk, pk, EvalKeys(relin, rots, tag))

    def _switch_key(self, s_from: np.ndarray, s: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        full = self._rows(self.L, special=True)
        comps = []
        for i in range(self.L + 1):
            a = self._uniform(full)
            e = self._small_to_rows(self._gaussian(), full)
            b = self._subm(e, self._mul(a, s, full), full)
            gadget = np.zeros(len(full), dtype=np.uint64)
            gadget[i] = self.P_mod[i]
            term = self._mul(s_from, np.repeat(gadget[:, None], self.n, axis=1), full)
            b = self._addm(b, term, full)
            comps.append((b, a))
        return comps

    def _key_switch(self, d: np.ndarray, level: int, key) -> tuple[np.ndarray, np.ndarray]:
        """Return (u0, u1) with u0 + u1*s ~ d*s' at ``level``."""
        rows = self._rows(level)
        ext = self._rows(level, special=True)
        qe = self.q_all[ext].astype(np.int64)[:, None]
        coef = self._intt(d.copy(), rows)
        acc0 = np.zeros((len(ext), self.n), dtype=np.uint64)
        acc1 = np.zeros_like(acc0)
        for i in range(level + 1):
            digit = np.mod(coef[i].astype(np.int64)[None, :], qe).astype(np.uint64)
            digit = self._ntt(digit, ext)
            kb, ka = key[i]
            acc0 = self._addm(acc0, self._mul(digit, np.ascontiguousarray(kb[ext]), ext), ext)
            acc1 = self._addm(acc1, self._mul(digit, np.ascontiguousarray(ka[ext]), ext), ext)
        return self._mod_down(acc0, level), self._mod_down(acc1, level)

    def _mod_down(self, acc: np.ndarray, level: int) -> np.ndarray:
        rows = self._rows(level)
        last = self._intt(acc[-1:].copy(), np.array([self.p_row]))[0].astype(np.int64)
        last = np.where(last > self.P // 2, last - self.P, last)
        t = self._small_to_rows(last, rows)
        diff = self._subm(acc[:-1], t, rows)
        pinv = np.repeat(self.P_inv[rows][:, None], self.n, axis=1)
        return self._mul(diff, pinv, rows)

    # encoding ---------------------------------------------------------------
    def _int_coeffs_to_rows(self, r: np.ndarray, level: int) -> np.ndarray:
        rows = self._rows(level)
        if np.max(np.abs(r), initial=0.0) < _INT64_SAFE:
            return self._small_to_rows(r.astype(np.int64), rows)
        big = [int(x) for x in r]
        out = np.empty((len(rows), self.n), dtype=np.uint64)
        for k, row in enumerate(rows):
            q = self.q_int[row]
            out[k] = [x % q for x in big]
        return self._ntt(out, rows)

    def encode(self, values, scale=None, level=None) -> Plaintext:
        scale = float(scale or self.params.scale)
        level = self.L if level is None else int(level)
        v = pad_slots(values, self.params.slots)
        m = slots_to_coeffs(v, self.n)
        bound = max(np.max(np.abs(v), initial=0.0), np.max(np.abs(m), initial=0.0)) * scale
        if bound > 0 and math.log2(bound) + 1 >= math.log2(self.params.modulus_at(level)):
            raise EncodeError(
                f"|v|*scale = 2^{math.log2(bound):.1f} exceeds the 2^{math.log2(self.params.modulus_at(level)):.1f} modulus at level {level}"
            )
        return Plaintext(self._int_coeffs_to_rows(np.rint(m * scale), level), level, scale)

    def decode(self, pt: Plaintext) -> np.ndarray:
        coeffs = self._to_signed(pt.data, pt.level)
        return coeffs_to_slots(coeffs / pt.scale, self.n)

    def _to_signed(self, data: np.ndarray, level: int) -> np.ndarray:
        """CRT-reconstruct centered integer coefficients as float64."""
        rows = self._rows(level)
        coef = self._intt(data.copy(), rows)
        if level == 0:
            q = self.q_int[0]
            c = coef[0].astype(np.int64)
            return np.where(c > q // 2, c - q, c).astype(np.float64)
        Q = self.params.modulus_at(level)
        acc = np.zeros(self.n, dtype=object)
        for i in range(level + 1):
            qi = self.q_int[i]
            Qi = Q // qi
            inv = pow(Qi, -1, qi)
            r = kernels.mulmod_rows(coef[i : i + 1], np.full((1, self.n), inv, dtype=np.uint64), [qi])[0]
            acc = acc + r.astype(object) * Qi
        acc = acc % Q
        half = Q // 2
        return np.array([float(x - Q) if x > half else float(x) for x in acc])

    # encryption ---------------------------------------------------------------
    def _encrypt(self, pt: Plaintext, pk: PublicKey) -> Ciphertext:
        level = pt.level
        rows = self._rows(level)
        b, a = pk.data
        v = self._small_to_rows(self._ternary(), rows)
        e0 = self._small_to_rows(self._gaussian(), rows)
        e1 = self._small_to_rows(self._gaussian(), rows)
        c0 = self._addm(self._addm(self._mul(b[rows], v, rows), e0, rows), pt.data[rows], rows)
        c1 = self._addm(self._mul(a[rows], v, rows), e1, rows)
        return Ciphertext((c0, c1), level, pt.scale, pk.tag)

    def _decrypt(self, ct: Ciphertext, sk: SecretKey) -> Plaintext:
        rows = self._rows(ct.level)
        c0, c1 = ct.data
        m = self._addm(c0, self._mul(c1, np.ascontiguousarray(sk.data[rows]), rows), rows)
        return Plaintext(m, ct.level, ct.scale)

    # arithmetic ---------------------------------------------------------------
    def _with(self, ct: Ciphertext, data, **kw) -> Ciphertext:
        fields = dict(level=ct.level, scale=ct.scale, key_tag=ct.key_tag, needs_rescale=ct.needs_rescale)
        fields.update(kw)
        return Ciphertext(data, **fields)

    def _add(self, a, b, sign):
        rows = self._rows(a.level)
        op = self._addm if sign > 0 else self._subm
        return self._with(a, tuple(op(x, y, rows) for x, y in zip(a.data, b.data)),
                          needs_rescale=a.needs_rescale or b.needs_rescale)

    def _add_plain(self, ct, pt, sign):
        rows = self._rows(ct.level)
        op = self._addm if sign > 0 else self._subm
        c0 = op(ct.data[0], pt.data[rows], rows)
        return self._with(ct, (c0,) + tuple(ct.data[1:]))

    def _const_rows(self, k: int, rows: np.ndarray) -> np.ndarray:
        col = np.array([k % self.q_int[r] for r in rows], dtype=np.uint64)
        return np.repeat(col[:, None], self.n, axis=1)

    def _add_const(self, ct, c):
        rows = self._rows(ct.level)
        k = int(round(c * ct.scale))
        c0 = self._addm(ct.data[0], self._const_rows(k, rows), rows)
        return self._with(ct, (c0,) + tuple(ct.data[1:]))

    def negate(self, ct):
        rows = self._rows(ct.level)
        zero = np.zeros((len(rows), self.n), dtype=np.uint64)
        return self._with(ct, tuple(self._subm(zero, x, rows) for x in ct.data))

    def _multiply(self, a, b, evk):
        rows = self._rows(a.level)
        a0, a1 = a.data
        b0, b1 = b.data
        d0 = self._mul(a0, b0, rows)
        d1 = self._addm(self._mul(a0, b1, rows), self._mul(a1, b0, rows), rows)
        d2 = self._mul(a1, b1, rows)
        u0, u1 = self._key_switch(d2, a.level, evk.relin)
        return self._with(a, (self._addm(d0, u0, rows), self._addm(d1, u1, rows)),
                          scale=a.scale * b.scale, needs_rescale=True)

    def _multiply_plain(self, ct, pt):
        rows = self._rows(ct.level)
        p = np.ascontiguousarray(pt.data[rows])
        return self._with(ct, tuple(self._mul(x, p, rows) for x in ct.data),
                          scale=ct.scale * pt.scale, needs_rescale=True)

    def _scalar_mult(self, ct, c, scale):
        rows = self._rows(ct.level)
        k = self._const_rows(int(round(c * scale)), rows)
        return self._with(ct, tuple(self._mul(x, k, rows) for x in ct.data),
                          scale=ct.scale * scale, needs_rescale=True)

    def _rescale(self, ct):
        level = ct.level
        ql = self.q_int[level]
        rows = self._rows(level - 1)
        inv = np.array([pow(ql, -1, self.q_int[r]) for r in rows], dtype=np.uint64)
        inv = np.repeat(inv[:, None], self.n, axis=1)
        out = []
        for x in ct.data:
            last = self._intt(x[level : level + 1].copy(), np.array([level]))[0].astype(np.int64)
            last = np.where(last > ql // 2, last - ql, last)
            t = self._small_to_rows(last, rows)
            out.append(self._mul(self._subm(np.ascontiguousarray(x[:level]), t, rows), inv, rows))
        return self._with(ct, tuple(out), level=level - 1, scale=ct.scale / ql, needs_rescale=False)

    def _drop_level(self, ct, level):
        return self._with(ct, tuple(np.ascontiguousarray(x[: level + 1]) for x in ct.data), level=level)

    def _rotate_one(self, ct, steps, evk):
        if steps not in evk.rotations:
            raise HeKeyError(f"no rotation key for step {steps}")
        perm = self._galois_perm(galois_element(steps, self.n))
        rows = self._rows(ct.level)
        c0 = np.ascontiguousarray(ct.data[0][:, perm])
        c1 = np.ascontiguousarray(ct.data[1][:, perm])
        u0, u1 = self._key_switch(c1, ct.level, evk.rotations[steps])
        return self._with(ct, (self._addm(c0, u0, rows), u1))

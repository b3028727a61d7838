"""Sites, the cloud server and the CSP as sequential state machines.

Each party owns its own backend instance (and thus its own op counter) and
talks to the others only through the fabric. The runner drives them phase by
phase in a fixed order.
"""
from __future__ import annotations

import math
import time
from collections import defaultdict, deque
from contextlib import contextmanager

import numpy as np

from .. import update_plan as plan
from ..approx_poly import evaluate_encrypted
from ..he.backend import Ciphertext, EvalKeys, HeBackend, KeyTrio, PublicKey, diff_counts
from ..he.errors import HeError
from ..models import Dataset, Model, Standardizer, gaussian_prior_gradient
from ..psgld import site_gradient
from ..rng import stream
from . import messages as M
from .channel import Fabric
from .masking import MaskPair, draw_mask, fisher_yates

ROUNDING_TOL = 0.25
CONSTANT_TOL = 1e-7
THETA_BOUND = 1e6
# site max norms are rounded up to this grid so the released maximum is exact after rounding
NORM_QUANTUM = 2.0**-20


def quantize_norm(m: float) -> float:
    return math.ceil(m / NORM_QUANTUM) * NORM_QUANTUM


class ProtocolAbort(RuntimeError):
    def __init__(self, party, cause: str):
        super().__init__(f"{party}: {cause}")
        self.party = party
        self.cause = cause


class Party:
    def __init__(self, pid: M.PartyId, backend: HeBackend, fabric: Fabric):
        self.pid = pid
        self.backend = backend
        self.fabric = fabric
        self.timings: dict[str, float] = defaultdict(float)

    @contextmanager
    def clock(self, phase: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[phase] += time.perf_counter() - start

    def send(self, to: M.PartyId, phase: str, kind: str, body, meta: tuple = ()):
        return self.fabric.send(self.pid, to, phase, kind, body, meta)

    def recv(self, frm: M.PartyId, kind: str) -> M.Message:
        return self.fabric.recv(self.pid, frm, kind)

    def abort(self, cause: str):
        raise ProtocolAbort(self.pid, cause)

    def _vector(self, values, width: int) -> np.ndarray:
        out = np.zeros(self.backend.params.slots)
        out[:width] = values
        return out


class Csp(Party):
    """Holds the secret key; decrypts only aggregates, masked values and released parameters."""

    def __init__(self, backend: HeBackend, fabric: Fabric):
        super().__init__(M.CSP, backend, fabric)
        self.keys: KeyTrio | None = None
        self.N: int | None = None

    def keygen(self, rotation_steps=None) -> tuple[PublicKey, EvalKeys]:
        with self.clock("keygen"):
            self.keys = self.backend.generate_keys(rotation_steps)
        return self.keys.pk, self.keys.evk

    def _dec(self, ct: Ciphertext) -> np.ndarray:
        return self.backend.decrypt_values(ct, self.keys.sk)

    def release_count(self, sites, with_sum: bool, d: int):
        with self.clock("standardize"):
            vals = self._dec(self.recv(M.SERVER, M.ENC_COUNT).ciphertext())
            N = int(round(vals[0]))
            if abs(vals[0] - N) > ROUNDING_TOL or N < 1:
                self.abort(f"sample count decrypted to {vals[0]!r}, beyond rounding tolerance")
            self.N = N
            body = {"N": N}
            if with_sum:
                body["s"] = self._dec(self.recv(M.SERVER, M.ENC_SUM).ciphertext())[:d]
            for pid in sites:
                self.send(pid, "standardize", M.GLOBAL_STATS, body)
            self.send(M.SERVER, "standardize", M.GLOBAL_STATS, {"N": N})

    def release_variance(self, sites, d: int):
        with self.clock("standardize"):
            S = self._dec(self.recv(M.SERVER, M.ENC_VARIANCE).ciphertext())[:d]
            for pid in sites:
                self.send(pid, "standardize", M.GLOBAL_STATS, {"S": S})

    def masked_max(self, K: int, t1t2: int, delta: float):
        with self.clock("normalize"):
            vals = [float(self._dec(self.recv(M.SERVER, M.ENC_MASKED_NORM).ciphertext())[0]) for _ in range(K)]
            top = max(vals)
            if not math.isfinite(top) or top * delta >= t1t2:
                self.abort("masked value outside the t1*t2 range")
            ct = self.backend.encrypt_values(self._vector([top], 1), self.keys.pk)
            self.send(M.SERVER, "normalize", M.ENC_MASKED_MAX, ct)

    def release_max(self, sites):
        with self.clock("normalize"):
            raw = float(self._dec(self.recv(M.SERVER, M.ENC_MAX).ciphertext())[0])
            if not math.isfinite(raw):
                self.abort(f"global max norm decrypted to {raw!r}")
            m = round(raw / NORM_QUANTUM) * NORM_QUANTUM
            if abs(raw - m) > ROUNDING_TOL * NORM_QUANTUM or not m > 0:
                self.abort(f"global max norm decrypted to {raw!r}, beyond rounding tolerance")
            for pid in sites:
                self.send(pid, "normalize", M.GLOBAL_STATS, {"m": m})

    def release_theta(self, layout: plan.BlockLayout, t: int):
        with self.clock("iterate"):
            ct = self.recv(M.SERVER, M.ENC_THETA).ciphertext()
            theta = layout.read(self._dec(ct), t)
            if not np.all(np.isfinite(theta)) or np.max(np.abs(theta)) > THETA_BOUND:
                self.abort(f"decrypted parameters out of range at t={t}")
            self.send(M.SERVER, "iterate", M.THETA_BROADCAST, {"t": t + 1, "theta": theta})


class Site(Party):
    def __init__(self, k: int, data: Dataset, backend: HeBackend, fabric: Fabric, pk: PublicKey,
                 model: Model, seed: int):
        super().__init__(M.site(k), backend, fabric)
        self.data = data
        self.pk = pk
        self.model = model
        self.batch_rng = stream(seed, "site", k - 1, "batch")
        self.N: int | None = None
        self.mean: np.ndarray | None = None
        self.var: np.ndarray | None = None
        self.keep: np.ndarray | None = None
        self.max_norm = 1.0
        self.theta: np.ndarray | None = None
        self.received: list[np.ndarray] = []

    def _enc(self, values, width: int) -> Ciphertext:
        return self.backend.encrypt_values(self._vector(values, width), self.pk)

    # standardization ---------------------------------------------------------
    def send_count(self, with_mean: bool):
        with self.clock("standardize"):
            d = self.data.d
            n = self.data.n
            self.send(M.SERVER, "standardize", M.ENC_COUNT, self._enc(np.full(d, float(n)), d))
            if with_mean:
                self.send(M.SERVER, "standardize", M.ENC_MEAN, self._enc(self.data.X.mean(axis=0), d))

    def receive_count(self, with_mean: bool):
        with self.clock("standardize"):
            body = self.recv(M.CSP, M.GLOBAL_STATS).clear()
            self.N = int(body["N"])
            if with_mean:
                self.mean = np.asarray(body["s"]) / self.N

    def send_variance_part(self):
        with self.clock("standardize"):
            d = self.data.d
            S_k = np.sum((self.data.X - self.mean) ** 2, axis=0) / self.N
            self.send(M.SERVER, "standardize", M.ENC_VARIANCE_PART, self._enc(S_k, d))

    def apply_standardization(self):
        with self.clock("standardize"):
            S = np.asarray(self.recv(M.CSP, M.GLOBAL_STATS).clear()["S"])
            self.keep = S > CONSTANT_TOL
            if not self.keep.any():
                self.abort("every column is constant")
            self.var = S[self.keep]
            self.mean = self.mean[self.keep]
            X = (self.data.X[:, self.keep] - self.mean) / np.sqrt(self.var)
            self.data = Dataset(X, self.data.y, self.data.time, self.data.event)

    # normalization ----------------------------------------------------------
    def send_norm(self):
        with self.clock("normalize"):
            m_k = quantize_norm(float(np.max(np.linalg.norm(self.data.X, axis=1))))
            self.send(M.SERVER, "normalize", M.ENC_NORM, self._enc([m_k], 1))

    def apply_normalization(self):
        with self.clock("normalize"):
            self.max_norm = float(self.recv(M.CSP, M.GLOBAL_STATS).clear()["m"])
            self.data = Dataset(self.data.X / self.max_norm, self.data.y, self.data.time, self.data.event)

    def standardizer(self) -> Standardizer:
        return Standardizer(self.keep, self.mean, self.var, self.max_norm)

    # iterations -------------------------------------------------------------
    def receive_theta(self):
        body = self.recv(M.SERVER, M.THETA_BROADCAST).clear()
        self.theta = np.asarray(body["theta"])
        self.received.append(self.theta)

    def iteration(self, t: int, layout: plan.BlockLayout, batch_size: int, c: float, L: float):
        with self.clock("iterate"):
            if batch_size > self.data.n:
                self.abort(f"mini-batch {batch_size} exceeds local data {self.data.n}")
            idx = self.batch_rng.choice(self.data.n, batch_size, replace=False)
            g = site_gradient(self.model, self.theta, self.data.take(idx), c, L)
            ct = self.backend.encrypt_values(layout.place(g, t), self.pk)
            self.send(M.SERVER, "iterate", M.ENC_GRADIENT, ct, meta=(t,))


class Server(Party):
    """Aggregates ciphertexts and runs the encrypted update; sees only ciphertexts and released theta."""

    def __init__(self, backend: HeBackend, fabric: Fabric, pk: PublicKey, evk: EvalKeys, seed: int):
        super().__init__(M.SERVER, backend, fabric)
        self.pk = pk
        self.evk = evk
        self.noise_rng = stream(seed, "server", "noise")
        self.mask_rng = stream(seed, "server", "mask")
        self.squares: deque[tuple[int, Ciphertext]] = deque(maxlen=plan.WINDOW)
        self.theta: np.ndarray | None = None
        self.N: int | None = None
        self.mask: MaskPair | None = None
        self.range_flags: list[dict] = []
        self.iteration_ops: list[dict] = []

    def _gather(self, sites, kind: str) -> list[Ciphertext]:
        return [self.recv(pid, kind).ciphertext() for pid in sites]

    # standardization ---------------------------------------------------------
    def aggregate_count(self, sites, with_mean: bool):
        be = self.backend
        with self.clock("standardize"):
            counts, products = [], []
            for pid in sites:
                ct_n = self.recv(pid, M.ENC_COUNT).ciphertext()
                counts.append(ct_n)
                if with_mean:
                    ct_mean = self.recv(pid, M.ENC_MEAN).ciphertext()
                    products.append(be.rescale(be.multiply(ct_n, ct_mean, self.evk)))
            self.send(M.CSP, "standardize", M.ENC_COUNT, be.add_many(counts))
            if with_mean:
                self.send(M.CSP, "standardize", M.ENC_SUM, be.add_many(products))

    def receive_count(self):
        self.N = int(self.recv(M.CSP, M.GLOBAL_STATS).clear()["N"])

    def aggregate_variance(self, sites):
        with self.clock("standardize"):
            self.send(M.CSP, "standardize", M.ENC_VARIANCE, self.backend.add_many(self._gather(sites, M.ENC_VARIANCE_PART)))

    # normalization ----------------------------------------------------------
    def mask_norms(self, sites):
        be = self.backend
        with self.clock("normalize"):
            self.mask = draw_mask(self.mask_rng)
            offset = self.mask.r1 / self.mask.delta
            masked = []
            for ct in self._gather(sites, M.ENC_NORM):
                masked.append(be.rescale(be.scalar_mult(be.add_const(ct, offset), float(self.mask.r2))))
            for i in fisher_yates(len(masked), self.mask_rng):
                self.send(M.CSP, "normalize", M.ENC_MASKED_NORM, masked[i])

    def unmask_max(self):
        be = self.backend
        with self.clock("normalize"):
            ct = self.recv(M.CSP, M.ENC_MASKED_MAX).ciphertext()
            inv = 1.0 / self.mask.r2
            # encode 1/r2 with ~50 significant bits regardless of r2's size
            scale = 2.0 ** (50 - math.floor(math.log2(inv)))
            ct = be.rescale(be.scalar_mult(ct, inv, scale))
            ct = be.add_const(ct, -self.mask.r1 / self.mask.delta)
            self.send(M.CSP, "normalize", M.ENC_MAX, ct)

    # iterations -------------------------------------------------------------
    def broadcast_theta(self, sites, t: int):
        with self.clock("iterate"):
            for pid in sites:
                self.send(pid, "iterate", M.THETA_BROADCAST, {"t": t, "theta": self.theta})

    def receive_theta(self):
        with self.clock("iterate"):
            self.theta = np.asarray(self.recv(M.CSP, M.THETA_BROADCAST).clear()["theta"])

    def iteration(self, sites, t: int, eta: float, layout: plan.BlockLayout, spec, site_coeffs,
                  prior_variance: float) -> Ciphertext:
        """Encrypted update for iteration t; sends Enc(theta_{t+1}) to the CSP."""
        be, evk = self.backend, self.evk
        K = len(sites)
        before = be.counter.snapshot()
        with self.clock("iterate"):
            grads = self._gather(sites, M.ENC_GRADIENT)
            ct_g = be.add_many(grads)
            self.squares.append((t, be.rescale(be.square(ct_g, evk))))

            consts = plan.iteration_constants(eta, spec.lam, spec.L, self.N, K, site_coeffs)
            ct_V = self.variance(t, layout, spec.alpha, consts.beta)
            self.check_variance(ct_V, t, layout, consts.beta, K)
            ct_G = self.preconditioner(ct_V, consts.coeffs)

            z = self.noise_rng.normal(size=layout.d)
            prior = -gaussian_prior_gradient(self.theta, prior_variance)
            offset = plan.update_offset(consts, prior, z)
            B = be.add_plain(ct_g, be.encode(layout.place(offset, t), ct_g.scale, ct_g.level))
            B = be.drop_level(B, ct_G.level)
            step = be.rescale(be.multiply(B, ct_G, evk))
            ct_theta = be.negate(step)
            ct_theta = be.add_plain(ct_theta, be.encode(layout.place(self.theta, t), ct_theta.scale, ct_theta.level))
            self.send(M.CSP, "iterate", M.ENC_THETA, ct_theta, meta=(t,))
        after = be.counter.snapshot()
        self.iteration_ops.append({k: v for k, v in sorted(diff_counts(after, before).items()) if v})
        return ct_theta

    def variance(self, t: int, layout: plan.BlockLayout, alpha: float, beta: float) -> Ciphertext:
        """Weighted window sum of squared aggregates, folded into block t mod r."""
        be, evk = self.backend, self.evk
        by_iter = dict(self.squares)
        acc = None
        for group in layout.groups(t):
            S = be.add_many([by_iter[i] for i in group])
            w = plan.weight_vector(layout, t, group, alpha, beta)
            P = be.rescale(be.multiply_plain(S, be.encode(w, be.params.moduli[S.level], S.level)))
            acc = P if acc is None else be.add(acc, P)
        for k in range(layout.fold_rounds(t)):
            acc = be.add(acc, be.rotate(acc, -(1 << k) * layout.d_pad, evk))
        return acc

    def check_variance(self, ct_V: Ciphertext, t: int, layout, beta: float, K: int):
        check = getattr(self.backend, "range_check", None)
        if check is None:
            return
        start = layout.block_of(t) * layout.d_pad
        ok = check(ct_V, 1e-3, 1.0, f"variance t={t}", scale_by=beta * K * K,
                   index=slice(start, start + layout.d))
        if not ok:
            self.range_flags.append(self.backend.range_flags[-1] | {"t": t})

    def preconditioner(self, ct_V: Ciphertext, coeffs) -> Ciphertext:
        try:
            return evaluate_encrypted(self.backend, coeffs, ct_V, self.evk)
        except HeError as exc:
            self.abort(f"preconditioner evaluation failed: {exc}")


"""Cleartext preconditioned Langevin samplers.

Three samplers share the building blocks below:

* ``run_sampler(mode="plain")``: RMSprop-preconditioned SGLD with the fixed
  schedule eta_t = 1.65e-2 / t.
* ``run_sampler(mode="dp")``: the private sampler with the privacy step size,
  scaled/clipped gradients and N(0, eta_t G) noise.
* ``ParitySampler``: the cleartext replica of the encrypted distributed update
  (windowed variance, polynomial preconditioner, eta' G z noise) whose float
  operation order matches the server's so mock-backend runs agree bit for bit.

Gradients are gradients of the negative log-likelihood (mean over the batch);
the log-prior gradient is negated before use.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import update_plan as plan
from .approx_poly import evaluate_mirror
from .dp_accounting import PrivacySpec, enforce_feasible, step_size
from .models import Dataset, Model, gaussian_prior_gradient
from .rng import stream

FLOOR = 1e-3
PLAIN_ETA0 = 1.65e-2
PRIOR_VARIANCE = 1.0
MODES = ("plain", "dp")


def _ema(V_prev: np.ndarray, sq: np.ndarray, alpha: float) -> np.ndarray:
    # the convex combination can round one ulp outside [min, max] of its inputs; clip it back
    V = alpha * V_prev + (1.0 - alpha) * sq
    return np.clip(V, np.minimum(V_prev, sq), np.maximum(V_prev, sq))


def variance_update(V_prev, g, alpha: float) -> np.ndarray:
    """alpha V + (1 - alpha) g*g, elementwise."""
    V_prev = np.asarray(V_prev, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if V_prev.shape != g.shape:
        raise ValueError(f"V has shape {V_prev.shape}, gradient {g.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return _ema(V_prev, g * g, alpha)


def inverse_preconditioner(V, lam: float) -> np.ndarray:
    """Diagonal of G^-1 = lam + sqrt(V), before the reciprocal."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    return lam + np.sqrt(np.asarray(V, dtype=np.float64))


def preconditioner(V, lam: float) -> np.ndarray:
    """Diagonal of G = 1 / (lam + sqrt(V))."""
    return 1.0 / inverse_preconditioner(V, lam)


@dataclass
class GradientBatch:
    g: np.ndarray
    precond_input: np.ndarray
    tau: int = 0
    c: float = 1.0
    clamped: int = 0


def adjust_gradient(raw, c: float, L: float = 1.0, floor: float = FLOOR, tau: int = 0) -> GradientBatch:
    """Scale by c, then clip magnitudes into [sqrt(floor), L] keeping the sign.

    A zero coordinate takes the + sign. The squared values, floored at
    ``floor``, are what the variance estimate sees.
    """
    if not c > 0:
        raise ValueError("scaling constant c must be positive")
    raw = np.asarray(raw, dtype=np.float64)
    scaled = c * raw
    mag = np.abs(scaled)
    lo = math.sqrt(floor)
    clipped = np.clip(mag, lo, L)
    # sign from raw: c * raw can underflow to -0.0 for subnormal inputs
    sign = np.where(raw < 0, -1.0, 1.0)
    g = sign * clipped
    return GradientBatch(g, np.maximum(g * g, floor), tau, c, int(np.count_nonzero(clipped != mag)))


def raw_batch(raw, tau: int = 0) -> GradientBatch:
    g = np.asarray(raw, dtype=np.float64)
    return GradientBatch(g, g * g, tau)


def site_gradient(model: Model, theta: np.ndarray, batch: Dataset, c: float, L: float) -> np.ndarray:
    """Adjusted mean gradient a site encrypts and sends."""
    return adjust_gradient(model.grad_nll(theta, batch), c, L, tau=batch.n).g


def site_batch_sizes(tau: int, sizes, proportional: bool = False) -> list[int]:
    """Local mini-batch sizes: tau/K each, or proportional to the site sizes."""
    sizes = [int(s) for s in sizes]
    K = len(sizes)
    if proportional:
        n = sum(sizes)
        out = [tau * s // n for s in sizes]
        out[int(np.argmax(sizes))] += tau - sum(out)
    else:
        if tau % K:
            raise ValueError(f"tau={tau} is not divisible by K={K}")
        out = [tau // K] * K
    for b, s in zip(out, sizes):
        if b > s:
            raise ValueError(f"local mini-batch {b} exceeds site size {s}")
        if b < 1:
            raise ValueError("every site needs a nonempty mini-batch")
    return out


def window_weights(t: int, alpha: float, W: int = plan.WINDOW) -> np.ndarray:
    """Weights alpha^(t-i) (1 - alpha) for i = t-w+1..t, oldest first."""
    w = min(t, W)
    return np.array([alpha ** (t - i) * (1.0 - alpha) for i in range(t - w + 1, t + 1)])


def windowed_variance(history, alpha: float, W: int = plan.WINDOW) -> np.ndarray:
    """Explicit weighted sum of the last W squared gradients (oldest first in ``history``)."""
    hist = np.asarray(history, dtype=np.float64)
    t = hist.shape[0]
    w = min(t, W)
    weights = window_weights(t, alpha, W)
    return weights @ (hist[t - w :] ** 2)


def gamma_correction(V: np.ndarray, g: np.ndarray, dg: np.ndarray, alpha: float, lam: float) -> np.ndarray:
    """Divergence term sum_j dG_ij/dtheta_j of the diagonal preconditioner.

    Only the current gradient depends on theta, so dG_i/dtheta_i =
    -(1-alpha) g_i dg_i / (sqrt(V_i) (lam + sqrt(V_i))^2) where dg_i is the
    diagonal of the gradient's Jacobian.
    """
    root = np.sqrt(V)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = -(1.0 - alpha) * g * dg / (root * (lam + root) ** 2)
    return np.where(root > 0, out, 0.0)


def jacobian_diagonal(fn, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    out = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        out[j] = (fn(theta + e)[j] - fn(theta - e)[j]) / (2 * h)
    return out


@dataclass
class SamplerState:
    """Everything that persists between iterations: theta, V, t and the two streams."""

    theta: np.ndarray
    V: np.ndarray
    t: int = 1
    batch_rng: np.random.Generator | None = None
    noise_rng: np.random.Generator | None = None
    eta: float = 0.0
    noise_norm: float = 0.0


def dp_psgld_step(state: SamplerState, batch: GradientBatch, spec: PrivacySpec, prior_gradient,
                  eta: float | None = None, gamma: np.ndarray | None = None,
                  strict: bool = False) -> SamplerState:
    """theta - (eta/2)[G(prior' + N g) + Gamma] + N(0, eta G).

    ``prior_gradient`` is the log-prior gradient (ascent form). ``gamma`` is the
    optional divergence term; without it the step matches the encrypted update.
    A missing noise stream means zero noise.
    """
    if strict:
        enforce_feasible(spec, strict=True)
    eta = step_size(state.t, spec) if eta is None else eta
    V = _ema(state.V, batch.precond_input, spec.alpha)
    G = preconditioner(V, spec.lam)
    drift = G * (-np.asarray(prior_gradient) + spec.N * batch.g)
    if gamma is not None:
        drift = drift + gamma
    if state.noise_rng is None:
        noise = np.zeros_like(state.theta)
    else:
        noise = np.sqrt(eta * G) * state.noise_rng.normal(size=state.theta.size)
    theta = state.theta - (eta / 2.0) * drift + noise
    return SamplerState(theta, V, state.t + 1, state.batch_rng, state.noise_rng, eta,
                        float(np.linalg.norm(noise)))


@dataclass
class Trajectory:
    """Released parameters theta_2..theta_{T'+1}, one row per iteration."""

    thetas: np.ndarray
    etas: np.ndarray
    noise_norms: np.ndarray
    mode: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.thetas.shape[0]

    def tail_mean(self, k: int = 20) -> np.ndarray:
        return self.thetas[-k:].mean(axis=0)

    def records(self):
        for i in range(len(self)):
            yield {"t": i + 1, "theta": self.thetas[i].tolist(), "eta": float(self.etas[i]),
                   "noise_norm": float(self.noise_norms[i])}

    def to_jsonl(self, path: str | Path) -> None:
        with Path(path).open("w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path, mode: str = "") -> "Trajectory":
        recs = [json.loads(line) for line in Path(path).read_text().splitlines() if line]
        return cls(np.array([r["theta"] for r in recs]), np.array([r["eta"] for r in recs]),
                   np.array([r["noise_norm"] for r in recs]), mode)


def run_sampler(model: Model, data: Dataset, spec: PrivacySpec, mode: str = "dp", seed: int = 0,
                c: float = 1.0, gamma_term: bool = False, strict: bool = False,
                theta0: np.ndarray | None = None, prior_variance: float = PRIOR_VARIANCE,
                iters: int | None = None, adjust_plain: bool = True) -> Trajectory:
    """Centralized sampler over ``data`` for T' = floor(N T / tau) iterations.

    Plain mode keeps the scaled and clipped gradients unless ``adjust_plain`` is
    False; with raw gradients the first steps (about eta_1 N / 2 per coordinate)
    can throw unbounded-gradient models far from the mode.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if data.n != spec.N:
        raise ValueError(f"spec has N={spec.N} but the dataset has {data.n} rows")
    if mode == "dp":
        enforce_feasible(spec, strict)
    d = model.dim(data)
    theta = np.zeros(d) if theta0 is None else np.array(theta0, dtype=np.float64)
    state = SamplerState(theta, np.zeros(d), 1, stream(seed, "central", "batch"), stream(seed, "central", "noise"))
    steps = spec.total_steps if iters is None else iters
    thetas = np.empty((steps, d))
    etas = np.empty(steps)
    norms = np.empty(steps)
    for k in range(steps):
        idx = state.batch_rng.choice(data.n, spec.tau, replace=False)
        batch = data.take(idx)
        raw = model.grad_nll(state.theta, batch)
        if mode == "plain":
            gb = adjust_gradient(raw, c, spec.L, tau=spec.tau) if adjust_plain else raw_batch(raw, spec.tau)
            eta = PLAIN_ETA0 / state.t
        else:
            gb = adjust_gradient(raw, c, spec.L, tau=spec.tau)
            eta = step_size(state.t, spec)
        gamma = None
        if gamma_term:
            scale = 1.0 if (mode == "plain" and not adjust_plain) else c
            dg = scale * jacobian_diagonal(lambda th: model.grad_nll(th, batch), state.theta)
            V_next = _ema(state.V, gb.precond_input, spec.alpha)
            gamma = gamma_correction(V_next, gb.g, dg, spec.alpha, spec.lam)
        prior = gaussian_prior_gradient(state.theta, prior_variance)
        state = dp_psgld_step(state, gb, spec, prior, eta=eta, gamma=gamma)
        thetas[k], etas[k], norms[k] = state.theta, state.eta, state.noise_norm
    return Trajectory(thetas, etas, norms, mode, {"seed": seed, "c": c})


# encrypted-update replica ---------------------------------------------------------
def packed_variance_mirror(weighted: dict[int, np.ndarray], t: int, layout: plan.BlockLayout,
                           W: int = plan.WINDOW) -> np.ndarray:
    """Weighted squared-gradient sum in the association order of the packed server.

    ``weighted[i]`` holds omega_i * (sum_k g_k,i)^2. Terms sharing a slot block are
    summed newest first; blocks are then combined by the rotate-fold tree.
    """
    w = layout.window(t, W)
    rounds = layout.fold_rounds(t, W)
    width = 1 << rounds
    d = next(iter(weighted.values())).shape
    blocks = []
    for u in range(width):
        acc = None
        for i in range(t - u, t - w, -layout.blocks):
            acc = weighted[i] if acc is None else acc + weighted[i]
        blocks.append(np.zeros(d) if acc is None else acc)
    for k in range(rounds):
        step = 1 << k
        blocks = [blocks[u] + blocks[u + step] for u in range(len(blocks) - step)]
    return blocks[0]


class ParitySampler:
    """Cleartext replica of the encrypted distributed update.

    ``sites`` are the site datasets exactly as the protocol holds them after
    preprocessing; ``site_coeffs`` are the preconditioner coefficients divided
    by K^(2j). Streams are keyed like the protocol's parties, so the same seed
    gives the same mini-batches and noise.
    """

    def __init__(self, model: Model, sites: list[Dataset], spec: PrivacySpec, site_coeffs, slots: int,
                 c: float, seed: int = 0, theta0: np.ndarray | None = None,
                 prior_variance: float = PRIOR_VARIANCE, batch_sizes: list[int] | None = None):
        self.model = model
        self.sites = sites
        self.spec = spec
        self.K = len(sites)
        self.site_coeffs = np.asarray(site_coeffs, dtype=np.float64)
        self.c = c
        self.prior_variance = prior_variance
        d = model.dim(sites[0])
        self.layout = plan.BlockLayout(slots, d)
        self.batch_sizes = batch_sizes or site_batch_sizes(spec.tau, [s.n for s in sites])
        self.theta = np.zeros(d) if theta0 is None else np.array(theta0, dtype=np.float64)
        self.t = 1
        self.site_rngs = [stream(seed, "site", k, "batch") for k in range(self.K)]
        self.noise_rng = stream(seed, "server", "noise")
        self.squares: deque[tuple[int, np.ndarray]] = deque(maxlen=plan.WINDOW)
        self.last: dict = {}

    def aggregate_gradient(self) -> np.ndarray:
        acc = None
        for k, site in enumerate(self.sites):
            idx = self.site_rngs[k].choice(site.n, self.batch_sizes[k], replace=False)
            g = site_gradient(self.model, self.theta, site.take(idx), self.c, self.spec.L)
            acc = g if acc is None else acc + g
        return acc

    def step(self) -> np.ndarray:
        t = self.t
        spec = self.spec
        g_sum = self.aggregate_gradient()
        self.squares.append((t, g_sum * g_sum))
        consts = plan.iteration_constants(step_size(t, spec), spec.lam, spec.L, spec.N, self.K, self.site_coeffs)
        weighted = {i: sq * plan.variance_weight(t, i, spec.alpha, consts.beta) for i, sq in self.squares}
        U = packed_variance_mirror(weighted, t, self.layout)
        G_scaled = evaluate_mirror(consts.coeffs, U)
        z = self.noise_rng.normal(size=self.theta.size)
        prior = -gaussian_prior_gradient(self.theta, self.prior_variance)
        B = g_sum + plan.update_offset(consts, prior, z)
        self.theta = -(B * G_scaled) + self.theta
        self.last = {"eta": consts.eta, "U": U, "G": G_scaled / consts.kappa,
                     "noise_norm": float(consts.eta_prime * np.linalg.norm(z * G_scaled / consts.kappa))}
        self.t += 1
        return self.theta

    def run(self, iters: int | None = None) -> Trajectory:
        steps = self.spec.total_steps if iters is None else iters
        d = self.theta.size
        thetas, etas, norms = np.empty((steps, d)), np.empty(steps), np.empty(steps)
        for k in range(steps):
            thetas[k] = self.step()
            etas[k] = self.last["eta"]
            norms[k] = self.last["noise_norm"]
        return Trajectory(thetas, etas, norms, "parity", {"c": self.c})

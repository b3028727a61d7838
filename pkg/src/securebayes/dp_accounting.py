"""Gaussian-mechanism calibration, the DP-pSGLD step-size schedule and composition.

All logarithms are natural.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

log = logging.getLogger(__name__)


class PrivacyDomainError(ValueError):
    """An argument lies outside the domain of a privacy formula."""


class InfeasibleSpecError(ValueError):
    """The iteration budget is below the minimum required by the privacy analysis."""


@dataclass(frozen=True)
class PrivacySpec:
    """Everything that fixes the DP step-size schedule and noise level."""

    epsilon: float
    delta: float
    tau: int
    T: int
    N: int
    L: float = 1.0
    lam: float = 1e-4
    alpha: float = 0.9
    gamma: float = 0.99

    def __post_init__(self):
        if not self.epsilon > 0:
            raise PrivacyDomainError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise PrivacyDomainError(f"delta must lie in (0, 1), got {self.delta}")
        if self.tau < 1 or self.N < 1 or self.T < 1:
            raise PrivacyDomainError("tau, N and T must be positive counts")
        if self.tau > self.N:
            raise PrivacyDomainError(f"mini-batch {self.tau} larger than dataset {self.N}")
        if not self.L > 0 or not self.lam > 0:
            raise PrivacyDomainError("L and lambda must be positive")
        if not 0 <= self.alpha <= 1:
            raise PrivacyDomainError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0 < self.gamma < 1:
            raise PrivacyDomainError(f"gamma must lie in (0, 1), got {self.gamma}")

    @property
    def total_steps(self) -> int:
        """Loop bound T' = floor(N T / tau)."""
        return (self.N * self.T) // self.tau

    def check_sites(self, K: int) -> None:
        if self.tau % K:
            raise PrivacyDomainError(f"tau={self.tau} is not divisible by K={K}")

    def to_dict(self) -> dict:
        return asdict(self)


def gaussian_sigma(sensitivity: float, epsilon: float, delta: float) -> float:
    """Smallest noise std giving (epsilon, delta)-DP for an l2 sensitivity."""
    # epsilon = 1 is accepted: it is the boundary case used throughout the experiments
    if not 0 < epsilon <= 1:
        raise PrivacyDomainError(f"epsilon must lie in (0, 1], got {epsilon}")
    if not 0 < delta < 1:
        raise PrivacyDomainError(f"delta must lie in (0, 1), got {delta}")
    if sensitivity < 0:
        raise PrivacyDomainError("sensitivity must be nonnegative")
    return sensitivity * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def step_size(t: int, spec: PrivacySpec) -> float:
    """eta_t = gamma eps^2 (lam + L) tau / (32 L^2 N log(2.5 N T/(tau delta)) log(2/delta) t)."""
    if t < 1:
        raise PrivacyDomainError(f"iteration index starts at 1, got {t}")
    num = spec.gamma * spec.epsilon**2 * (spec.lam + spec.L) * spec.tau
    den = (
        32.0
        * spec.L**2
        * spec.N
        * math.log(2.5 * spec.N * spec.T / (spec.tau * spec.delta))
        * math.log(2.0 / spec.delta)
        * t
    )
    return num / den


@dataclass(frozen=True)
class Feasibility:
    feasible: bool
    min_T: float
    T: int

    def __bool__(self) -> bool:
        return self.feasible

    def message(self) -> str:
        verdict = "feasible" if self.feasible else "infeasible"
        return f"{verdict}: T={self.T}, minimum T={self.min_T:.6g}"


def min_epochs(epsilon: float, N: int, tau: int, delta: float) -> float:
    return epsilon**2 * N / (32.0 * tau * math.log(2.0 / delta))


def check_feasible(spec: PrivacySpec) -> Feasibility:
    """True iff T >= eps^2 N / (32 tau log(2/delta))."""
    bound = min_epochs(spec.epsilon, spec.N, spec.tau, spec.delta)
    return Feasibility(spec.T >= bound, bound, spec.T)


def enforce_feasible(spec: PrivacySpec, strict: bool) -> Feasibility:
    result = check_feasible(spec)
    if not result:
        if strict:
            raise InfeasibleSpecError(result.message())
        log.warning("%s; continuing without the privacy guarantee", result.message())
    return result


def advanced_compose(k: int, epsilon: float, delta: float, delta_prime: float) -> tuple[float, float]:
    """k-fold adaptive composition of (epsilon, delta)-DP mechanisms."""
    if k < 0 or epsilon < 0 or delta < 0 or delta_prime <= 0:
        raise PrivacyDomainError("k, epsilon, delta must be nonnegative and delta' positive")
    if k == 0:
        return 0.0, delta_prime
    eps_g = math.sqrt(2.0 * k * math.log(1.0 / delta_prime)) * epsilon + k * epsilon * math.expm1(epsilon)
    return eps_g, k * delta + delta_prime


def per_step_budget(spec: PrivacySpec) -> tuple[float, float]:
    """(epsilon_1, delta_1) spent by one step so that T' steps compose to (epsilon, delta).

    epsilon_1 = epsilon / sqrt(8 T' log(2/delta)) and delta_1 = delta / (2 T').
    """
    steps = spec.total_steps
    eps1 = spec.epsilon / math.sqrt(8.0 * steps * math.log(2.0 / spec.delta))
    return eps1, spec.delta / (2.0 * steps)


def proof_chain_noise_std(t: int, spec: PrivacySpec, G: float) -> float:
    """Noise std on the gradient implied by Langevin noise N(0, eta_t G).

    Dividing the variance eta_t G by the factor N^2 eta_t^2 G^2 / (4 tau^2) that
    multiplies the gradient gives sigma = 2 tau / (N sqrt(eta_t G)).
    """
    eta = step_size(t, spec)
    return 2.0 * spec.tau / (spec.N * math.sqrt(eta * G))


def required_noise_std(spec: PrivacySpec) -> float:
    """Gaussian-mechanism std for sensitivity 2L/tau under the per-step budget.

    The per-step budget epsilon_1 is spent on a tau/N subsample, so the
    mechanism itself may use epsilon_0 = epsilon_1 N / (2 tau).
    """
    eps1, delta1 = per_step_budget(spec)
    eps0 = eps1 * spec.N / (2.0 * spec.tau)
    return (2.0 * spec.L / spec.tau) * math.sqrt(2.0 * math.log(1.25 / delta1)) / eps0


def noise_margin(t: int, spec: PrivacySpec, G: float) -> float:
    """Ratio of injected to required noise; >= 1 means the step is calibrated."""
    return proof_chain_noise_std(t, spec, G) / required_noise_std(spec)

"""Chebyshev approximation of the RMSprop preconditioner and its encrypted evaluation.

The fit is ``c_0/2 + sum_j c_j T_j(u)`` with ``u = (2x - (b+a)) / (b-a)``. The
monomial form is expanded in exact rational arithmetic from the float
Chebyshev coefficients, then stored as double-double pairs so that cleartext
evaluation of the two forms agrees far below float64 conditioning of the
power basis. Encrypted evaluation uses the rounded float64 coefficients.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .he.backend import Ciphertext, EvalKeys, HeBackend
from .he.errors import DepthExhaustedError

DEFAULT_INTERVAL = (1e-3, 1.0)
DEFAULT_DEGREE = 7
DEFAULT_LAMBDA = 1e-4
DENSE_POINTS = 100_000


class FitError(ValueError):
    """The target function is not finite at an interpolation node."""


def preconditioner_fn(lam: float = DEFAULT_LAMBDA) -> Callable[[np.ndarray], np.ndarray]:
    """x -> 1 / (lam + sqrt(x))."""
    return lambda x: 1.0 / (lam + np.sqrt(x))


# double-double helpers ------------------------------------------------------
_SPLIT = 134217729.0  # 2**27 + 1


def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _split(a):
    t = _SPLIT * a
    hi = t - (t - a)
    return hi, a - hi


def _two_prod(a, b):
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


def _dd_horner(hi: Sequence[float], lo: Sequence[float], x: np.ndarray) -> np.ndarray:
    """Evaluate sum_j (hi_j + lo_j) x^j in double-double precision."""
    x = np.asarray(x, dtype=np.float64)
    r_hi = np.full_like(x, hi[-1])
    r_lo = np.full_like(x, lo[-1])
    for j in range(len(hi) - 2, -1, -1):
        p, e = _two_prod(r_hi, x)
        e = e + r_lo * x
        p, e = _two_sum(p, e)  # renormalize
        s, f = _two_sum(p, hi[j])
        f = f + e + lo[j]
        r_hi, r_lo = _two_sum(s, f)
    return r_hi + r_lo


def _chebyshev_power_basis(degree: int) -> list[list[int]]:
    """Integer coefficients of T_0..T_degree in the power basis of u."""
    T = [[1], [0, 1]]
    for j in range(1, degree):
        nxt = [0] * (j + 2)
        for i, c in enumerate(T[j]):
            nxt[i + 1] += 2 * c
        for i, c in enumerate(T[j - 1]):
            nxt[i] -= c
        T.append(nxt)
    return T[: degree + 1]


@dataclass
class ChebApprox:
    a: float
    b: float
    degree: int
    cheb: np.ndarray
    monomial_exact: list[Fraction] = field(repr=False, default_factory=list)
    max_error: float = float("nan")

    @property
    def monomial(self) -> np.ndarray:
        """float64 monomial coefficients a_0..a_d."""
        return np.array([float(c) for c in self.monomial_exact])

    @property
    def monomial_lo(self) -> np.ndarray:
        return np.array([float(c - Fraction(float(c))) for c in self.monomial_exact])

    def eval_chebyshev(self, x) -> np.ndarray:
        """Clenshaw recurrence on the mapped argument."""
        u = (2.0 * np.asarray(x, dtype=np.float64) - (self.b + self.a)) / (self.b - self.a)
        b1 = np.zeros_like(u)
        b2 = np.zeros_like(u)
        for c in self.cheb[:0:-1]:
            b1, b2 = 2.0 * u * b1 - b2 + c, b1
        return u * b1 - b2 + 0.5 * self.cheb[0]

    def eval_monomial(self, x) -> np.ndarray:
        return _dd_horner(self.monomial, self.monomial_lo, x)

    def to_json(self) -> str:
        return json.dumps(
            {
                "interval": [self.a, self.b],
                "degree": self.degree,
                "chebyshev": [float(c) for c in self.cheb],
                "monomial": [float(c) for c in self.monomial],
                "max_error": self.max_error,
            },
            indent=2,
        )


def chebyshev_fit(f: Callable, a: float, b: float, degree: int, dense_points: int = DENSE_POINTS) -> ChebApprox:
    """Interpolate ``f`` at the ``degree+1`` Chebyshev nodes of ``[a, b]``."""
    if not a < b:
        raise FitError(f"empty interval [{a}, {b}]")
    m = degree + 1
    k = np.arange(m)
    u = np.cos(np.pi * (k + 0.5) / m)
    x = 0.5 * (b - a) * u + 0.5 * (b + a)
    with np.errstate(all="ignore"):
        fx = np.asarray(f(x), dtype=np.float64)
    if not np.all(np.isfinite(fx)):
        raise FitError("function is not finite at an interpolation node")
    cheb = np.array([2.0 / m * np.sum(fx * np.cos(j * np.pi * (k + 0.5) / m)) for j in range(m)])
    approx = ChebApprox(a, b, degree, cheb)
    approx.monomial_exact = to_monomial_exact(approx)
    grid = np.linspace(a, b, dense_points)
    with np.errstate(all="ignore"):
        approx.max_error = float(np.max(np.abs(approx.eval_chebyshev(grid) - f(grid))))
    return approx


def to_monomial_exact(approx: ChebApprox) -> list[Fraction]:
    basis = _chebyshev_power_basis(approx.degree)
    a, b = Fraction(approx.a), Fraction(approx.b)
    # u = s*x + o
    s = Fraction(2) / (b - a)
    o = -(b + a) / (b - a)
    # powers of (s x + o) as coefficient lists in x
    upow = [[Fraction(1)]]
    for _ in range(approx.degree):
        prev = upow[-1]
        nxt = [Fraction(0)] * (len(prev) + 1)
        for i, c in enumerate(prev):
            nxt[i] += c * o
            nxt[i + 1] += c * s
        upow.append(nxt)
    out = [Fraction(0)] * (approx.degree + 1)
    for j, cj in enumerate(approx.cheb):
        w = Fraction(float(cj)) * (Fraction(1, 2) if j == 0 else 1)
        for p, tp in enumerate(basis[j]):
            if tp:
                for i, c in enumerate(upow[p]):
                    out[i] += w * tp * c
    return out


def to_monomial(approx: ChebApprox) -> np.ndarray:
    """Monomial coefficients a_0..a_d of the fitted polynomial."""
    return approx.monomial


def rescale_for_sites(coeffs: Sequence[float], K: int) -> np.ndarray:
    """a_j / K^(2j), so the polynomial can be evaluated on K^2-scaled inputs."""
    if K < 1:
        raise ValueError("K must be at least 1")
    return np.array([c / float(K) ** (2 * j) for j, c in enumerate(coeffs)])


def taylor_coefficients(lam: float, center: float, degree: int) -> np.ndarray:
    """Taylor coefficients of 1/(lam + sqrt(x)) about ``center`` in powers of (x - center)."""
    import sympy as sp

    x = sp.Symbol("x")
    expr = 1 / (sp.nsimplify(lam) + sp.sqrt(x))
    out = []
    d = expr
    for j in range(degree + 1):
        out.append(float(d.subs(x, sp.nsimplify(center)).evalf(30) / sp.factorial(j)))
        d = sp.diff(d, x)
    return np.array(out)


def taylor_max_error(lam: float, a: float, b: float, degree: int, dense_points: int = DENSE_POINTS) -> float:
    """Max error of the degree-``degree`` Taylor expansion about the midpoint of [a, b]."""
    center = 0.5 * (a + b)
    coef = taylor_coefficients(lam, center, degree)
    grid = np.linspace(a, b, dense_points)
    approx = np.polynomial.polynomial.polyval(grid - center, coef)
    return float(np.max(np.abs(approx - preconditioner_fn(lam)(grid))))


def fit_preconditioner(lam: float = DEFAULT_LAMBDA, interval=DEFAULT_INTERVAL, degree: int = DEFAULT_DEGREE) -> ChebApprox:
    return chebyshev_fit(preconditioner_fn(lam), interval[0], interval[1], degree)


# encrypted evaluation ---------------------------------------------------------
def required_depth(degree: int) -> int:
    return max(1, math.ceil(math.log2(degree + 1)))


def _bits(j: int) -> list[int]:
    return [k for k in range(j.bit_length()) if j >> k & 1]


def evaluate_encrypted(
    backend: HeBackend,
    coeffs: Sequence[float],
    ct_x: Ciphertext,
    evk: EvalKeys,
    target_scale: float | None = None,
) -> Ciphertext:
    """Evaluate sum_j coeffs[j] x^j on ``ct_x`` with depth ceil(log2(d+1)).

    Powers x^(2^k) come from repeated squaring. Term j multiplies its lowest
    power-of-two factor by the coefficient first, then by the remaining
    factors in increasing order. Each coefficient is encoded at the scale that
    makes its term land exactly on a common target scale, so the terms add
    without realignment. A leading coefficient of exactly 1.0 needs no scalar
    product; its natural scale then becomes the target.
    """
    coeffs = [float(c) for c in coeffs]
    degree = len(coeffs) - 1
    while degree > 0 and coeffs[degree] == 0.0:
        degree -= 1
    if degree == 0:
        return _constant(backend, ct_x, coeffs[0])
    depth = required_depth(degree)
    if ct_x.level < depth:
        raise DepthExhaustedError(f"degree {degree} needs {depth} levels, input has {ct_x.level}")
    q = backend.params.moduli
    top = ct_x.level
    final_level = top - depth

    powers = {0: ct_x}
    for k in range(1, degree.bit_length()):
        prev = powers[k - 1]
        powers[k] = backend.rescale(backend.square(prev, evk))

    monic = coeffs[degree] == 1.0
    if target_scale is None:
        target_scale = _path_scale(powers, _bits(degree), q) if monic else backend.params.scale

    terms = []
    for j in range(1, degree + 1):
        c = coeffs[j]
        if c == 0.0:
            continue
        bits = _bits(j)
        low = powers[bits[0]]
        if j == degree and monic:
            term = low
        else:
            # predict the scale path with a unit constant and solve for the constant's scale
            s_c = target_scale / _path_scale(powers, bits, q, 1.0)
            term = backend.rescale(backend.scalar_mult(low, c, s_c))
        for k in bits[1:]:
            other = powers[k]
            lvl = min(term.level, other.level)
            term = backend.drop_level(term, lvl)
            other = backend.drop_level(other, lvl)
            term = backend.rescale(backend.multiply(term, other, evk))
        terms.append(backend.drop_level(term, final_level))
    acc = backend.add_many(terms)
    return backend.add_const(acc, coeffs[0])


def _path_scale(powers, bits, q, const_scale=None):
    """Scale at the end of a term's product path.

    With ``const_scale`` the path starts with a scalar product and its rescale;
    without it the lowest power enters the first ciphertext product directly.
    """
    low = powers[bits[0]]
    scale, level = low.scale, low.level
    if const_scale is not None:
        scale = scale * const_scale / q[level]
        level -= 1
    for k in bits[1:]:
        other = powers[k]
        level = min(level, other.level)
        scale = scale * other.scale / q[level]
        level -= 1
    return scale


def _constant(backend, ct_x, c):
    zero = backend.scalar_mult(ct_x, 0.0)
    return backend.add_const(backend.rescale(zero), c)


def evaluate_mirror(coeffs: Sequence[float], x: np.ndarray) -> np.ndarray:
    """Cleartext replica of :func:`evaluate_encrypted` with identical float64 operation order."""
    coeffs = [float(c) for c in coeffs]
    degree = len(coeffs) - 1
    while degree > 0 and coeffs[degree] == 0.0:
        degree -= 1
    x = np.asarray(x, dtype=np.float64)
    if degree == 0:
        return x * 0.0 + coeffs[0]
    powers = {0: x}
    for k in range(1, degree.bit_length()):
        powers[k] = powers[k - 1] * powers[k - 1]
    monic = coeffs[degree] == 1.0
    acc = None
    for j in range(1, degree + 1):
        c = coeffs[j]
        if c == 0.0:
            continue
        bits = _bits(j)
        term = powers[bits[0]] if (j == degree and monic) else powers[bits[0]] * c
        for k in bits[1:]:
            term = term * powers[k]
        acc = term if acc is None else acc + term
    return acc + coeffs[0]

"""Likelihoods and gradient providers for the density, logistic and survival models.

Providers return gradients of the NEGATIVE log-likelihood averaged over the
mini-batch, so a descent step on them moves toward the posterior mode. The
ascent-form expressions are kept as separate functions for auditing.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace

import numpy as np

DENSITY_VARIANCE = 0.1


class PreprocessError(ValueError):
    pass


@dataclass
class Dataset:
    """Feature rows plus model-specific targets.

    ``y`` holds {0,1} labels (logistic); ``time``/``event`` hold survival
    responses; density observations live in ``X`` alone. ``partition`` lists the
    row indices owned by each site.
    """

    X: np.ndarray
    y: np.ndarray | None = None
    time: np.ndarray | None = None
    event: np.ndarray | None = None
    partition: list[np.ndarray] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        return Dataset(self.X[idx], pick(self.y), pick(self.time), pick(self.event))

    def with_partition(self, parts: list[np.ndarray]) -> "Dataset":
        return replace(self, partition=[np.asarray(p) for p in parts])

    def site(self, k: int) -> "Dataset":
        return self.take(self.partition[k])


# priors ------------------------------------------------------------------------
def gaussian_prior_gradient(theta: np.ndarray, sigma2: float) -> np.ndarray:
    """Gradient of log N(theta; 0, sigma2 I): -theta / sigma2."""
    if not sigma2 > 0:
        raise ValueError("prior variance must be positive")
    return -np.asarray(theta, dtype=np.float64) / sigma2


def prior_nll_gradient(theta: np.ndarray, sigma2: float) -> np.ndarray:
    return -gaussian_prior_gradient(theta, sigma2)


# ascent-form expressions ----------------------------------------------------------
def density_gradient(theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Mean of (x - theta) / 0.1 over the mini-batch (ascent form)."""
    X = np.atleast_2d(X)
    if X.shape[1] != np.size(theta):
        raise ValueError(f"observations have {X.shape[1]} dims, theta has {np.size(theta)}")
    return np.mean(X - theta, axis=0) / DENSITY_VARIANCE


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logistic_gradient(beta: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Mean of x (y - mu) with mu = sigmoid(beta^T x) (ascent form, labels in {0,1})."""
    mu = sigmoid(X @ beta)
    return X.T @ (y - mu) / X.shape[0]


def survival_gradient(alpha: float, beta: np.ndarray, X: np.ndarray, time: np.ndarray,
                      event: np.ndarray) -> tuple[float, np.ndarray]:
    """Per-sample derivative of the exponential-model log-likelihood, averaged (ascent form).

    d/dbeta = x (t / (alpha e^{beta^T x}) - c), d/dalpha = -c/alpha + t / (alpha^2 e^{beta^T x}).
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    r = time * np.exp(-(X @ beta)) / alpha
    d_beta = X.T @ (r - event) / X.shape[0]
    d_alpha = float(np.mean(-event / alpha + r / alpha))
    return d_alpha, d_beta


def survival_gradient_aggregate(alpha: float, beta: np.ndarray, site_blocks) -> tuple[float, np.ndarray]:
    """The printed site-aggregate expressions, evaluated verbatim.

    For each site k with (X^k, t^k, c^k): the alpha part is (t^T 1) / (exp(beta^T X^T 1) c^T 1)
    and the beta part is (1/alpha) X^T t / exp(beta^T X^T 1) - X^T 1. ``X^k 1`` is read as
    the column sums of the site's feature block so that beta^T (X^T 1) is a scalar.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    d_alpha = 0.0
    d_beta = None
    for X, t, c in site_blocks:
        s = float(np.exp(beta @ X.sum(axis=0)))
        d_alpha += float(t.sum()) / (s * float(c.sum()))
        part = (X.T @ t) / (alpha * s) - X.sum(axis=0)
        d_beta = part if d_beta is None else d_beta + part
    return d_alpha, d_beta


# models -------------------------------------------------------------------------
class Model(ABC):
    name: str
    higher_is_better = True

    @abstractmethod
    def dim(self, data: Dataset) -> int: ...

    @abstractmethod
    def nll(self, theta: np.ndarray, batch: Dataset) -> float:
        """Mean negative log-likelihood of the batch."""

    @abstractmethod
    def per_sample_grad(self, theta: np.ndarray, batch: Dataset) -> np.ndarray:
        """(n, d) gradients of the per-sample negative log-likelihood."""

    def grad_nll(self, theta: np.ndarray, batch: Dataset) -> np.ndarray:
        return self.per_sample_grad(theta, batch).mean(axis=0)

    @abstractmethod
    def metric(self, theta: np.ndarray, test: Dataset) -> float: ...


class DensityModel(Model):
    """Two independent Gaussians with unknown means and variance 0.1."""

    name = "density"
    higher_is_better = False

    def __init__(self, truth=(0.5, -0.5)):
        self.truth = np.asarray(truth, dtype=np.float64)

    def dim(self, data):
        return data.d

    def nll(self, theta, batch):
        return float(np.mean(np.sum((batch.X - theta) ** 2, axis=1)) / (2 * DENSITY_VARIANCE))

    def per_sample_grad(self, theta, batch):
        return -(batch.X - theta) / DENSITY_VARIANCE

    def grad_nll(self, theta, batch):
        return -density_gradient(theta, batch.X)

    def metric(self, theta, test):
        """Max absolute parameter error against the generating means."""
        return float(np.max(np.abs(np.asarray(theta) - self.truth)))


class LogisticModel(Model):
    name = "logistic"

    def dim(self, data):
        return data.d

    def nll(self, theta, batch):
        z = batch.X @ theta
        return float(np.mean(np.logaddexp(0.0, z) - batch.y * z))

    def per_sample_grad(self, theta, batch):
        mu = sigmoid(batch.X @ theta)
        return -batch.X * (batch.y - mu)[:, None]

    def grad_nll(self, theta, batch):
        return -logistic_gradient(theta, batch.X, batch.y)

    def predict(self, theta, X):
        return (sigmoid(X @ theta) >= 0.5).astype(np.int64)

    def metric(self, theta, test):
        return float(np.mean(self.predict(theta, test.X) == test.y))


class SurvivalModel(Model):
    """Exponential survival model with scale alpha e^{beta^T x}; alpha is held fixed.

    ``verbatim=True`` swaps the gradient for the printed site-aggregate form.
    Classification: a subject is predicted dead by ``horizon`` when the survival
    probability exp(-h / (alpha e^{beta^T x})) drops below one half. The default
    horizon is the baseline median survival time alpha ln 2, where that rule
    reduces to beta^T x < 0. Subjects censored before the horizon have no label
    and are skipped.
    """

    name = "survival"

    def __init__(self, alpha: float = 1.0, verbatim: bool = False, horizon: float | None = None):
        if not alpha > 0:
            raise ValueError("alpha must be positive")
        self.alpha = alpha
        self.verbatim = verbatim
        self.horizon = alpha * np.log(2.0) if horizon is None else horizon

    def dim(self, data):
        return data.d

    def nll(self, theta, batch):
        z = batch.X @ theta
        ll = batch.event * (np.log(self.alpha) + z) + batch.time / (self.alpha * np.exp(z))
        return float(np.mean(ll))

    def per_sample_grad(self, theta, batch):
        r = batch.time * np.exp(-(batch.X @ theta)) / self.alpha
        return -batch.X * (r - batch.event)[:, None]

    def grad_nll(self, theta, batch):
        if self.verbatim:
            _, g = survival_gradient_aggregate(self.alpha, theta, [(batch.X, batch.time, batch.event)])
            return -g / batch.n
        _, g = survival_gradient(self.alpha, theta, batch.X, batch.time, batch.event)
        return -g

    def median_horizon(self, train: Dataset) -> float:
        """Alternative horizon: the median observed training time."""
        self.horizon = float(np.median(train.time))
        return self.horizon

    def labels(self, data: Dataset, horizon: float) -> tuple[np.ndarray, np.ndarray]:
        died = (data.event == 1) & (data.time <= horizon)
        known = died | (data.time > horizon)
        return died.astype(np.int64), known

    def predict(self, theta, X, horizon):
        surv = np.exp(-horizon / (self.alpha * np.exp(X @ theta)))
        return (surv < 0.5).astype(np.int64)

    def metric(self, theta, test):
        h = self.horizon
        y, known = self.labels(test, h)
        pred = self.predict(theta, test.X[known], h)
        return float(np.mean(pred == y[known]))


# scaling constants c by model and number of sites
AUX_C = {
    "density": {1: 80.0},
    "logistic": {1: 3500.0, 2: 3500.0, 5: 1000.0, 10: 1000.0, 16: 900.0},
    "survival": {1: 2000.0, 2: 2000.0, 5: 800.0},
}


def default_aux_c(model: str, K: int) -> float:
    """Table value for the largest tabulated site count not above K."""
    table = AUX_C[model]
    eligible = [k for k in table if k <= K]
    return table[max(eligible) if eligible else min(table)]


MODELS = {"density": DensityModel, "logistic": LogisticModel, "survival": SurvivalModel}


def make_model(name: str, **kw) -> Model:
    try:
        return MODELS[name](**kw)
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None


# preprocessing ---------------------------------------------------------------------
def standardize_stats(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column mean and population variance."""
    return X.mean(axis=0), X.var(axis=0)


def drop_constant_columns(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    keep = np.ptp(X, axis=0) > 0
    return X[:, keep], keep


@dataclass(frozen=True)
class Standardizer:
    """Column mask, global mean/variance and max row norm released by the precomputation."""

    keep: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    max_norm: float = 1.0

    def standardize(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64)[:, self.keep] - self.mean) / np.sqrt(self.var)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return self.standardize(X) / self.max_norm

    def apply(self, data: Dataset) -> Dataset:
        return replace(data, X=self.transform(data.X))


def fit_standardizer(X: np.ndarray) -> Standardizer:
    """Drop constant columns, then fit mean, variance and the post-standardization max row norm."""
    X, keep = drop_constant_columns(np.asarray(X, dtype=np.float64))
    if X.shape[1] == 0:
        raise PreprocessError("no nonconstant columns left")
    mean, var = standardize_stats(X)
    if np.any(var <= 0):
        raise PreprocessError("zero-variance column after dropping constant columns")
    Z = (X - mean) / np.sqrt(var)
    return Standardizer(keep, mean, var, float(np.max(np.linalg.norm(Z, axis=1))))


def preprocess(data: Dataset) -> Dataset:
    """Drop constant columns, standardize, then divide every row by the max row norm."""
    return fit_standardizer(data.X).apply(data)


def encode_labels(y) -> np.ndarray:
    """Accept {0,1} or {-1,+1} labels and return {0,1} integers."""
    y = np.asarray(y)
    vals = set(np.unique(y).tolist())
    if vals <= {0, 1}:
        return y.astype(np.int64)
    if vals <= {-1, 1}:
        return (y > 0).astype(np.int64)
    raise ValueError(f"labels must be in {{0,1}} or {{-1,+1}}, got {sorted(vals)}")

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from securebayes.models import (
    Dataset,
    PreprocessError,
    SurvivalModel,
    default_aux_c,
    density_gradient,
    encode_labels,
    fit_standardizer,
    gaussian_prior_gradient,
    logistic_gradient,
    make_model,
    preprocess,
    standardize_stats,
    survival_gradient,
    survival_gradient_aggregate,
)
from securebayes.data import make_density, make_logistic, make_survival

small = st.floats(-2, 2, allow_nan=False)


def central_difference(f, theta, h=1e-6):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def test_prior_gradient():
    assert np.array_equal(gaussian_prior_gradient(np.array([1.0, -2.0]), 1.0), [-1.0, 2.0])
    assert np.array_equal(gaussian_prior_gradient(np.zeros(3), 2.0), np.zeros(3))
    assert np.allclose(gaussian_prior_gradient(np.ones(2), 1e300), 0.0)
    with pytest.raises(ValueError):
        gaussian_prior_gradient(np.ones(2), 0.0)


def test_density_gradient_closed_form():
    assert np.allclose(density_gradient(np.array([0.5, 0.5]), np.array([[0.6, 0.6]])), [1.0, 1.0])
    assert np.array_equal(density_gradient(np.array([0.2, 0.3]), np.array([[0.2, 0.3]])), [0.0, 0.0])
    with pytest.raises(ValueError):
        density_gradient(np.zeros(3), np.zeros((4, 2)))
    data = make_density(0)
    g = density_gradient(np.zeros(2), data.X)
    assert g[0] > 0 > g[1]


def test_density_generator_matches_stated_distribution():
    data = make_density(0)
    assert data.X.shape == (10_000, 2)
    assert np.allclose(data.X.mean(axis=0), [0.5, -0.5], atol=0.02)
    assert np.allclose(data.X.var(axis=0), 0.1, atol=0.01)
    assert np.array_equal(make_density(0).X, data.X)


def test_logistic_gradient_hand_values():
    assert np.allclose(logistic_gradient(np.zeros(2), np.array([[1.0, 0.0]]), np.array([1])), [0.5, 0.0])
    X = np.array([[0.3, -0.2]])
    beta = np.array([1.0, 2.0])
    mu = 1 / (1 + np.exp(-X @ beta))
    assert np.allclose(logistic_gradient(beta, X, mu), 0.0)


@settings(max_examples=30)
@given(arrays(np.float64, (6, 3), elements=small), arrays(np.float64, 3, elements=small),
       arrays(np.int64, 6, elements=st.integers(0, 1)))
def test_logistic_gradient_matches_finite_differences(X, beta, y):
    model = make_model("logistic")
    batch = Dataset(X, y=y)
    fd = central_difference(lambda b: model.nll(b, batch), beta)
    assert np.allclose(model.grad_nll(beta, batch), fd, rtol=1e-5, atol=1e-8)


@settings(max_examples=30)
@given(arrays(np.float64, (5, 2), elements=small), arrays(np.float64, 2, elements=small),
       arrays(np.float64, 5, elements=st.floats(0, 5)), arrays(np.int64, 5, elements=st.integers(0, 1)),
       st.floats(0.2, 3))
def test_survival_gradient_matches_finite_differences(X, beta, t, c, alpha):
    model = SurvivalModel(alpha=alpha)
    batch = Dataset(X, time=t, event=c)
    fd = central_difference(lambda b: model.nll(b, batch), beta)
    assert np.allclose(model.grad_nll(beta, batch), fd, rtol=1e-5, atol=1e-7)
    # alpha derivative of the mean log-likelihood
    ll = lambda a: -SurvivalModel(alpha=a).nll(beta, batch)
    d_alpha, _ = survival_gradient(alpha, beta, X, t, c)
    assert d_alpha == pytest.approx((ll(alpha + 1e-6) - ll(alpha - 1e-6)) / 2e-6, rel=1e-5, abs=1e-7)


def test_survival_hand_values():
    _, g = survival_gradient(1.0, np.zeros(1), np.zeros((1, 1)), np.array([1.0]), np.array([1]))
    assert g[0] == 0.0
    _, g = survival_gradient_aggregate(1.0, np.zeros(1), [(np.ones((2, 1)), np.array([2.0, 4.0]), np.array([1, 1]))])
    assert g[0] == 4.0
    with pytest.raises(ValueError):
        survival_gradient(0.0, np.zeros(1), np.zeros((1, 1)), np.ones(1), np.ones(1))
    with pytest.raises(ValueError):
        SurvivalModel(alpha=-1.0)


def test_survival_default_horizon_rule_is_linear_sign():
    model = SurvivalModel(alpha=2.0)
    r = np.random.default_rng(0)
    X, theta = r.normal(size=(200, 3)), r.normal(size=3)
    assert np.array_equal(model.predict(theta, X, model.horizon), (X @ theta < 0).astype(int))


def test_survival_metric_skips_early_censoring():
    model = SurvivalModel(horizon=1.0)
    test = Dataset(np.array([[1.0], [1.0], [1.0]]), time=np.array([0.5, 0.5, 2.0]), event=np.array([1, 0, 0]))
    y, known = model.labels(test, 1.0)
    assert known.tolist() == [True, False, True]
    assert y.tolist() == [1, 0, 0]


def test_two_site_statistics_example():
    stats = standardize_stats(np.array([[1.0], [3.0], [5.0], [7.0]]))
    assert stats[0][0] == 4.0 and stats[1][0] == 5.0


@settings(max_examples=30)
@given(arrays(np.int64, (20, 4), elements=st.integers(-50, 50)))
def test_preprocess_norm_cap_and_idempotence(X):
    X = X.astype(np.float64)
    X[:, 0] = np.arange(20.0)
    X[:, 1] = 7.0
    out = preprocess(Dataset(X)).X
    assert out.shape[1] <= 3
    assert np.max(np.linalg.norm(out, axis=1)) == pytest.approx(1.0)
    assert np.allclose(out.mean(axis=0), 0.0, atol=1e-12)
    std = fit_standardizer(X).standardize(X)
    assert np.allclose(fit_standardizer(std).standardize(std), std, atol=1e-9)


def test_preprocess_rejects_degenerate_columns():
    with pytest.raises(PreprocessError):
        preprocess(Dataset(np.ones((5, 2))))
    # nonzero range but a variance that underflows to zero
    with pytest.raises(PreprocessError):
        preprocess(Dataset(np.array([[0.0], [5e-324], [0.0]])))


def test_preprocessed_logistic_gradients_are_bounded_by_one():
    data = preprocess(make_logistic(0))
    model = make_model("logistic")
    r = np.random.default_rng(1)
    for _ in range(5):
        g = model.per_sample_grad(r.normal(size=data.d), data)
        assert np.max(np.linalg.norm(g, axis=1)) <= 1.0 + 1e-12


def test_synthetic_shapes():
    assert make_logistic(0).X.shape == (4000, 184)
    s = make_survival(0)
    assert s.X.shape == (7874, 7) and set(np.unique(s.event)) <= {0, 1} and np.all(s.time >= 0)


def test_label_encoding_and_aux_constants():
    assert encode_labels([-1, 1, 1]).tolist() == [0, 1, 1]
    assert encode_labels([0, 1]).tolist() == [0, 1]
    with pytest.raises(ValueError):
        encode_labels([0, 2])
    assert default_aux_c("logistic", 5) == 1000.0
    assert default_aux_c("logistic", 7) == 1000.0
    assert default_aux_c("survival", 2) == 2000.0
    assert default_aux_c("density", 2) == 80.0
    with pytest.raises(ValueError):
        make_model("cox")

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from doublecox.estimation import (
    ConditioningError,
    FitOptions,
    InvalidDataError,
    fit,
    observed_information_covariance,
)
from doublecox.likelihood import Dataset, MarginalLikelihood
from doublecox.model import Family, ModelSpec, ParameterVector
from doublecox.optimize import fd_gradient, minimize_bfgs
from doublecox.simulation import CensoringPlan, SimConfig, generate_dataset

NO_CENS = CensoringPlan(None, 0.0)


def simulate(family=Family.WEIBULL, n=500, n_clusters=50, params=None, seed=1):
    params = params or ParameterVector(20.0, 1.5, (-0.5, -1.0), (-0.05, -0.1), 0.5)
    cfg = SimConfig(family=family, n=n, n_clusters=n_clusters, true_params=params, seed=seed)
    return generate_dataset(cfg, NO_CENS)


@pytest.fixture(scope="module")
def weibull_data():
    return simulate()


def test_exponential_recovery():
    p = ParameterVector(20.0, 1.0, (-0.5,), (), 0.0)
    data = simulate(n=2000, n_clusters=100, params=p, seed=11)
    spec = ModelSpec(Family.WEIBULL, (0,), ())
    res = fit(data, spec)
    assert res.converged
    assert abs(res.estimates.beta_scale[0] + 0.5) < 0.08
    assert res.estimates.sigma2 < 0.05


def test_no_events_rejected():
    data = Dataset(np.array([1.0, 2.0]), np.array([False, False]), (1, 2), np.zeros((2, 0)), ())
    with pytest.raises(InvalidDataError):
        fit(data, ModelSpec(Family.WEIBULL, (), ()))


def test_constant_column_named(weibull_data):
    cov = weibull_data.covariates.copy()
    cov[:, 1] = 3.0
    data = weibull_data.with_covariates(cov)
    with pytest.raises(InvalidDataError, match="Score"):
        fit(data, ModelSpec(Family.WEIBULL, (0, 1), ()))


def test_full_fit_and_branches(weibull_data):
    spec = ModelSpec(Family.WEIBULL, (0, 1), (0, 1))
    res = fit(weibull_data, spec)
    assert res.converged and not res.at_boundary
    assert res.loglik > res.branch_logliks["zero"]
    assert res.estimates.sigma2 > 0.1
    cov = res.covariance
    assert np.allclose(cov, cov.T) and np.all(np.diag(cov) > 0)
    assert res.param_names[-1] == "sigma2"


def test_boundary_fit_reports_zero():
    p = ParameterVector(20.0, 1.5, (-0.5, -1.0), (), 0.0)
    data = simulate(n=400, n_clusters=40, params=p, seed=3)
    res = fit(data, ModelSpec(Family.WEIBULL, (0, 1), ()))
    assert res.converged
    assert res.loglik >= res.branch_logliks["zero"]
    assert (res.loglik == res.branch_logliks["zero"]) == res.at_boundary
    if res.at_boundary:
        assert res.estimates.sigma2 == 0.0


def test_nonconvergence_is_flagged_not_raised(weibull_data):
    res = fit(weibull_data, ModelSpec(Family.WEIBULL, (0, 1), (0, 1)), FitOptions(max_iterations=2))
    assert res.converged is False


def test_fixed_parameters_stay(weibull_data):
    spec = ModelSpec(Family.WEIBULL, (0, 1), (0, 1))
    res = fit(weibull_data, spec, fixed={2: -0.5, 6: 0.5})
    assert res.estimates.beta_scale[0] == -0.5 and res.estimates.sigma2 == 0.5
    assert res.covariance[2, 2] == 0 and res.covariance[6, 6] == 0


def test_no_frailty_spec(weibull_data):
    spec = ModelSpec(Family.WEIBULL, (0, 1), (), frailty=False)
    res = fit(weibull_data, spec)
    assert res.estimates.sigma2 == 0.0 and not res.at_boundary
    assert list(res.branch_logliks) == ["zero"]


def test_gompertz_fit():
    p = ParameterVector(1e-4, 0.1, (-0.5, -1.0), (-0.05, -0.1), 1.0)
    data = simulate(Family.GOMPERTZ, n=600, n_clusters=60, params=p, seed=5)
    res = fit(data, ModelSpec(Family.GOMPERTZ, (0, 1), (0, 1)))
    assert res.converged
    assert 0.05 < res.estimates.b < 0.2


def test_multistart_is_seeded(weibull_data):
    spec = ModelSpec(Family.WEIBULL, (0, 1), ())
    r1 = fit(weibull_data, spec, FitOptions(multistart=2, seed=4))
    r2 = fit(weibull_data, spec, FitOptions(multistart=2, seed=4))
    assert r1.loglik == r2.loglik
    assert r1.loglik >= fit(weibull_data, spec).loglik - 1e-6


def test_reparameterization_consistency(weibull_data):
    spec = ModelSpec(Family.WEIBULL, (0, 1), (0, 1))
    base = fit(weibull_data, spec)
    cov = weibull_data.covariates.copy()
    cov[:, 1] *= 2
    scaled = fit(weibull_data.with_covariates(cov), spec)
    for j in (3, 5):  # Score in the scale and shape terms
        b0, b1 = base.estimates.to_array()[j], scaled.estimates.to_array()[j]
        assert abs(b1 - b0 / 2) <= 1e-3 * abs(b0 / 2) + 1e-6
    assert abs(scaled.loglik - base.loglik) < 1e-6


def test_quadratic_covariance():
    spec = ModelSpec(Family.WEIBULL, (0,), ())
    m = np.array([2.0, 1.5, -0.3, 0.7])
    rng = np.random.default_rng(0)
    B = rng.normal(size=(4, 4))
    A = B @ B.T + 4 * np.eye(4)

    def quad(rows):
        d = np.atleast_2d(rows) - m
        return -0.5 * np.einsum("ij,jk,ik->i", d, A, d)

    cov = observed_information_covariance(None, spec, ParameterVector.from_array(m, spec), loglik=quad)
    assert np.allclose(cov, np.linalg.inv(A), rtol=1e-6, atol=0)


def test_exponential_log_a_variance():
    p = ParameterVector(20.0, 1.0, (), (), 0.0)
    data = simulate(n=800, n_clusters=80, params=p, seed=8)
    spec = ModelSpec(Family.WEIBULL, (), (), frailty=False)
    res = fit(data, spec, fixed={1: 1.0})
    var_log_a = res.covariance[0, 0] / res.estimates.a**2
    D = data.n_events
    assert var_log_a == pytest.approx(1 / D, rel=0.10)


def test_rank_deficient_conditioning_error():
    rng = np.random.default_rng(3)
    n = 50
    X = rng.normal(size=(n, 4))
    ev = np.zeros(n, bool)
    ev[:3] = True
    data = Dataset(rng.exponential(20, n), ev, tuple(i % 10 for i in range(n)), X, ("x1", "x2", "x3", "x4"))
    spec = ModelSpec(Family.WEIBULL, (0, 1, 2, 3), (0, 1, 2))
    assert spec.n_params == 10
    res = fit(data, spec)
    assert res.covariance is None and "eigenvalue" in res.covariance_error
    with pytest.raises(ConditioningError) as info:
        observed_information_covariance(data, spec, res.estimates)
    assert np.isfinite(info.value.smallest_eigenvalue)
    pinv = observed_information_covariance(data, spec, res.estimates, pseudo_inverse=True)
    assert pinv.shape == (10, 10)


def test_monotone_progress(weibull_data):
    spec = ModelSpec(Family.WEIBULL, (0, 1), (0, 1))
    lik = MarginalLikelihood(weibull_data, spec)

    def objective(X):
        X = np.atleast_2d(X)
        rows = X.copy()
        rows[:, :2] = np.exp(X[:, :2])
        rows[:, -1] = X[:, -1] ** 2
        return -lik(rows)

    seen = []
    res = minimize_bfgs(objective, np.array([3.0, 0.0, 0, 0, 0, 0, 0.7]), callback=lambda x, f: seen.append(f))
    assert res.converged
    assert len(seen) > 3
    assert all(b <= a for a, b in zip(seen, seen[1:]))


SMALL = simulate(n=200, n_clusters=20, seed=2)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fd_gradient_richardson(seed):
    """Default central differences agree with a Richardson-extrapolated gradient."""
    rng = np.random.default_rng(seed)
    spec = ModelSpec(Family.WEIBULL, (0, 1), (0, 1))
    lik = MarginalLikelihood(SMALL, spec)
    x = np.array([
        rng.uniform(10, 30), rng.uniform(0.8, 2.5), *rng.uniform(-1, 1, 2), *rng.uniform(-0.2, 0.2, 2),
        rng.uniform(0.1, 2),
    ])
    fun = lambda X: -lik(np.atleast_2d(X))
    g = fd_gradient(fun, x, 1e-5)
    h = 1e-3 * np.maximum(1.0, np.abs(x))
    g1 = fd_gradient(fun, x, 0, steps=h)
    g2 = fd_gradient(fun, x, 0, steps=h / 2)
    rich = (4 * g2 - g1) / 3
    scale = np.max(np.abs(rich))
    assert np.max(np.abs(g - rich)) / scale < 1e-4


def test_options_validation():
    with pytest.raises(ValueError):
        FitOptions(max_iterations=0)
    with pytest.raises(ValueError):
        FitOptions(multistart=-1)
    with pytest.raises(ValueError):
        FitOptions(fd_step=0)

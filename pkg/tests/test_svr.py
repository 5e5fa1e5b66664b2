import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from occanomaly.svr import ConvergenceError, DegenerateInputError, SvrHyper, fit_svr, rbf_kernel


def linear_data(n=50, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 5.0, n)
    return x, 2.0 * x + 1.0


def dual_objective(coef, x, y, gamma, eps):
    K = rbf_kernel(x, x, gamma)
    return 0.5 * coef @ K @ coef + eps * np.abs(coef).sum() - y @ coef


def full_coef(model, x):
    coef = np.zeros(len(x))
    for sv, a in zip(model.support_inputs, model.dual_coeffs):
        coef[np.flatnonzero(x == sv)[0]] += a
    return coef


def test_linear_fit_within_tube():
    x, y = linear_data()
    model = fit_svr(x, y)
    assert np.max(np.abs(model.predict(x) - y)) <= 0.1 + 1e-3
    assert abs(model.dual_coeffs.sum()) < 1e-6
    assert np.all(np.abs(model.dual_coeffs) <= model.c_reg + 1e-6)


def test_objective_non_increasing():
    x, y = linear_data(30, seed=3)
    model = fit_svr(x, y + np.sin(3 * x), track_objective=True)
    trace = np.asarray(model.objective_trace)
    assert len(trace) == model.n_iter + 1
    assert np.all(np.diff(trace) <= 1e-9)


def test_matches_generic_optimizer_on_small_problem():
    rng = np.random.default_rng(4)
    x = np.sort(rng.uniform(0, 3, 8))
    y = np.cos(2 * x) + 0.3 * x
    hyper = SvrHyper(c_reg=5.0, epsilon=0.05, gamma=1.5)
    model = fit_svr(x, y, hyper)
    n, C = len(x), hyper.c_reg
    K = rbf_kernel(x, x, hyper.gamma)

    def f(v):
        a, b = v[:n], v[n:]
        return 0.5 * (a - b) @ K @ (a - b) + hyper.epsilon * (a + b).sum() - y @ (a - b)

    res = minimize(
        f, np.zeros(2 * n), method="SLSQP", bounds=[(0, C)] * (2 * n),
        constraints=[{"type": "eq", "fun": lambda v: v[:n].sum() - v[n:].sum()}],
        options={"ftol": 1e-12, "maxiter": 1000},
    )
    ours = dual_objective(full_coef(model, x), x, y, hyper.gamma, hyper.epsilon)
    assert ours <= res.fun + 1e-6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.5))
def test_dual_feasible(seed, eps):
    rng = np.random.default_rng(seed)
    x = rng.uniform(1, 50, 25)
    y = 80.0 / x + rng.normal(0, 0.2, 25)
    model = fit_svr(x, y, SvrHyper(c_reg=10.0, epsilon=eps))
    assert abs(model.dual_coeffs.sum()) < 1e-6
    assert np.all(np.abs(model.dual_coeffs) <= 10.0 + 1e-9)
    assert model.kkt_gap < 1e-5


def test_identity_mapping():
    x = np.linspace(1, 10, 40)
    model = fit_svr(x, x)
    assert np.max(np.abs(model.predict(x) - x)) <= 0.1 + 1e-3


def test_default_gamma():
    x, y = linear_data(20)
    model = fit_svr(x, y)
    assert model.gamma == pytest.approx(1.0 / (2.0 * np.var(x)))


def test_degenerate_inputs():
    with pytest.raises(DegenerateInputError):
        fit_svr(np.ones(5), np.arange(5.0))
    with pytest.raises(DegenerateInputError):
        fit_svr(np.array([1.0]), np.array([2.0]))
    with pytest.raises(ValueError):
        fit_svr(np.array([1.0, np.nan]), np.array([1.0, 2.0]))


def test_iteration_cap():
    x, y = linear_data()
    with pytest.raises(ConvergenceError) as err:
        fit_svr(x, y, SvrHyper(max_iter=2))
    assert err.value.residual > 0


def test_predict_chunking():
    x, y = linear_data()
    model = fit_svr(x, y)
    q = np.linspace(0, 5, 1000)
    np.testing.assert_allclose(model.predict(q, chunk=7), model.predict(q), atol=1e-12)

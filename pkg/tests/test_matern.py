import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mrfgrid.errors import DomainError, NumericError
from mrfgrid.matern import (MaternParams, build_corr_matrix, cholesky_jitter, gp_predict,
                            gp_profile_fit, matern_corr, simulate_gp_field)


def test_params_validation():
    with pytest.raises(DomainError):
        MaternParams(0.0, 1.0)
    with pytest.raises(DomainError):
        MaternParams(1.0, -1.0)


def test_corr_at_zero_and_domain_errors():
    assert matern_corr(0.0, 2.0, 0.3) == 1.0
    with pytest.raises(DomainError):
        matern_corr(-0.1, 2.0, 0.3)
    with pytest.raises(DomainError):
        matern_corr(np.inf, 2.0, 0.3)
    with pytest.raises(DomainError):
        matern_corr(0.1, 0.0, 0.3)


@pytest.mark.parametrize("rho", [0.005, 0.32, 2.56])
def test_exponential_closed_form(rho):
    d = np.linspace(0, 5 * rho, 100)
    np.testing.assert_allclose(matern_corr(d, 0.5, rho), np.exp(-math.sqrt(2) * d / rho),
                               rtol=0, atol=1e-12)


def test_nu_three_halves_closed_form():
    # K_{3/2}(x) closed form gives (1 + x) exp(-x) for the correlation
    d = np.linspace(0, 2, 50)
    x = 2 * math.sqrt(1.5) * d / 0.4
    np.testing.assert_allclose(matern_corr(d, 1.5, 0.4), (1 + x) * np.exp(-x), atol=1e-12)


def test_monotone_decreasing():
    assert matern_corr(0.1, 2.0, 1.0) > matern_corr(0.2, 2.0, 1.0)
    d = np.linspace(0, 3, 200)
    assert np.all(np.diff(matern_corr(d, 2.0, 0.5)) <= 0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 5.0), st.floats(0.01, 3.0), st.floats(0.0, 10.0))
def test_corr_in_unit_interval(nu, rho, d):
    v = matern_corr(d, nu, rho)
    assert 0.0 <= v <= 1.0


def test_corr_matrix_basics(rng):
    p = MaternParams(0.5, 0.3)
    assert build_corr_matrix([[0.2, 0.3]], p).tolist() == [[1.0]]
    R = build_corr_matrix([[0.2, 0.3], [0.2, 0.3]], p)
    assert R[0, 1] == 1.0
    X = rng.random((5, 2))
    D = np.sqrt(((X[:, None, :] - X[None, :, :]) ** 2).sum(-1))
    np.testing.assert_allclose(build_corr_matrix(X, p), np.exp(-math.sqrt(2) * D / 0.3),
                               atol=1e-12)


@pytest.mark.parametrize("nu", [0.5, 2.0])
@pytest.mark.parametrize("rho", [0.005, 0.02, 0.08, 0.32, 1.28, 2.56])
def test_corr_matrix_factorizes_on_factorial(nu, rho):
    g = np.stack(np.meshgrid(np.linspace(0, 1, 12), np.linspace(0, 1, 12)), -1).reshape(-1, 2)
    R = build_corr_matrix(g, MaternParams(nu, rho))
    np.testing.assert_array_equal(R, R.T)
    L, jitter = cholesky_jitter(R)
    assert jitter <= 1e-7


def test_cholesky_jitter_gives_up():
    with pytest.raises(NumericError):
        cholesky_jitter(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_simulation_moments_and_determinism(rng):
    locs = rng.random((25, 2))
    p = MaternParams(2.0, 0.3, 1.0)
    draws = simulate_gp_field(locs, p, seed=3, size=2000)
    assert draws.shape == (2000, 25)
    assert np.all(np.abs(draws.var(axis=0) - 1.0) < 0.1)
    np.testing.assert_array_equal(simulate_gp_field(locs, p, seed=9),
                                  simulate_gp_field(locs, p, seed=9))


def test_simulation_long_range_is_smooth():
    locs = np.array([[0.5, 0.5], [0.51, 0.5]])
    draws = simulate_gp_field(locs, MaternParams(2.0, 2.56), seed=1, size=500)
    assert np.corrcoef(draws.T)[0, 1] > 0.99


def test_predict_interpolates_and_reproduces_constants(rng):
    X = rng.random((12, 2))
    p = MaternParams(0.5, 0.3)
    Y = rng.standard_normal(12)
    np.testing.assert_allclose(gp_predict(X, X, p, 0.0, Y), Y, atol=1e-8)
    G = rng.random((40, 2))
    np.testing.assert_allclose(gp_predict(X, G, p, 0.1, np.full(12, 2.5)), 2.5, atol=1e-10)


def test_predict_far_away_returns_mean():
    X = np.array([[0.0, 0.0]])
    p = MaternParams(2.0, 0.1)
    ghat = gp_predict(X, [[5.0, 5.0]], p, 0.1, [3.0])
    assert ghat[0] == pytest.approx(3.0, abs=1e-3 * 3.0)


def test_predict_is_linear(rng):
    X, G = rng.random((15, 2)), rng.random((30, 2))
    p = MaternParams(2.0, 0.3)
    Y1, Y2 = rng.standard_normal(15), rng.standard_normal(15)
    lhs = gp_predict(X, G, p, 0.05, 2.0 * Y1 - 3.0 * Y2)
    rhs = 2.0 * gp_predict(X, G, p, 0.05, Y1) - 3.0 * gp_predict(X, G, p, 0.05, Y2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_predict_singular_system_is_numeric_error():
    X = np.array([[0.1, 0.1], [0.1, 0.1]])
    with pytest.raises(NumericError, match="condition"):
        gp_predict(X, X, MaternParams(0.5, 0.3), 0.0, [1.0, 2.0])


def test_predict_variance_zero_at_noiseless_data(rng):
    X = rng.random((10, 2))
    _, var = gp_predict(X, X, MaternParams(0.5, 0.3), 0.0, rng.standard_normal(10),
                        return_var=True)
    assert np.all(var < 1e-8)


def test_profile_fit_pure_noise(rng):
    X = rng.random((150, 2))
    Y = rng.standard_normal(150)
    grid = rng.random((50, 2))
    fit = gp_profile_fit(X, grid, 0.5, Y)
    assert np.max(np.abs(fit.ghat - Y.mean())) < 0.2 * Y.std()


def test_profile_fit_collinear_small_n():
    X = np.column_stack([np.linspace(0, 1, 5), np.zeros(5)])
    fit = gp_profile_fit(X, X, 2.0, [0.1, 0.4, 0.2, 0.5, 0.3])
    assert np.all(np.isfinite([fit.lam, fit.rho, fit.tau2])) and np.all(np.isfinite(fit.ghat))


def test_profile_fit_needs_three_points():
    with pytest.raises(DomainError):
        gp_profile_fit([[0, 0], [1, 1]], [[0, 0]], 0.5, [1.0, 2.0])


@pytest.mark.slow
def test_profile_fit_recovers_range():
    hits = 0
    for rep in range(20):
        r = np.random.default_rng(100 + rep)
        X = r.random((1000, 2))
        g = simulate_gp_field(X, MaternParams(2.0, 0.32), seed=r)
        Y = g + 0.15 * r.standard_normal(1000)
        fit = gp_profile_fit(X, X[:5], 2.0, Y, domain=1.0)
        hits += 0.5 <= fit.rho / 0.32 <= 2.0
    assert hits >= 16

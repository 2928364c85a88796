import math

import numpy as np
import pytest
import scipy.sparse as sp

from conftest import dense_pinv
from mrfgrid.errors import DomainError, NumericError
from mrfgrid.grid import GridSpec, build_areal_mapping, build_point_mapping, coarse_tiling
from mrfgrid.normal_fit import (FitResult, Hyperparams, SmoothingSystem, bracketed_search,
                                compute_ghat, dense_profile_loglik, golden_section_max,
                                marginal_quadform_and_logdet, maximize_lambda, pointwise_se,
                                posterior_draw_g, profile_beta_tau, profile_loglik)
from mrfgrid.precision import build_precision, null_space_basis

FAMILIES = [("icar", None), ("hicar", 3.0), ("dicar", 5.0), ("tpsmrf", None)]


def _toy(n_side=6, n=10, family="tpsmrf", seed=0):
    rng = np.random.default_rng(seed)
    grid = GridSpec.unit_square(n_side)
    K = build_point_mapping(grid, rng.random((n, 2)))
    prec = build_precision(grid, family)
    Y = np.sin(4 * rng.random(n)) + 0.3 * rng.standard_normal(n)
    return grid, K, prec, Y


def test_hyperparams():
    h = Hyperparams(2.0, 0.5)
    assert h.kappa == 4.0
    with pytest.raises(DomainError):
        Hyperparams(0.0, 1.0)
    with pytest.raises(DomainError):
        Hyperparams(1.0, np.nan)


def test_ghat_no_smoothing_limit():
    grid = GridSpec.unit_square(6)
    K = sp.identity(36, format="csr")
    Y = np.random.default_rng(1).standard_normal(36)
    ghat = compute_ghat(K, build_precision(grid, "icar"), 1e-12, Y)
    np.testing.assert_allclose(ghat, Y, atol=1e-6)


@pytest.mark.parametrize("family, param", FAMILIES)
@pytest.mark.parametrize("lam", [1e-3, 1.0, 1e4])
def test_ghat_reproduces_constants(family, param, lam):
    grid = GridSpec.unit_square(8)
    K = build_point_mapping(grid, np.random.default_rng(2).random((20, 2)))
    ghat = compute_ghat(K, build_precision(grid, family, param), lam, np.full(20, 3.7))
    np.testing.assert_allclose(ghat, 3.7, atol=1e-8)


def test_tps_reproduces_linear_trends_with_full_observation():
    grid = GridSpec.unit_square(8)
    prec = build_precision(grid, "tpsmrf")
    c = grid.centroids()
    Y = 1.0 + 2.0 * c[:, 0] - 0.5 * c[:, 1]
    for lam in (1e-2, 1.0, 1e5):
        np.testing.assert_allclose(compute_ghat(sp.identity(64), prec, lam, Y), Y, atol=1e-7)


def test_ghat_matches_dense_and_residual_bound():
    grid, K, prec, Y = _toy(8, 20)
    lam = math.exp(2)
    ghat = compute_ghat(K, prec, lam, Y)
    A = (K.T @ K + lam * prec.Q).toarray()
    np.testing.assert_allclose(ghat, np.linalg.solve(A, K.T @ Y), rtol=0, atol=1e-10)
    rhs = K.T @ Y
    assert np.abs(A @ ghat - rhs).max() <= 1e-8 * np.abs(rhs).max()


def test_unidentified_null_space():
    grid = GridSpec.unit_square(6)
    K = build_point_mapping(grid, [[0.1, 0.1], [0.9, 0.9]])
    with pytest.raises(DomainError):
        SmoothingSystem(K, build_precision(grid, "tpsmrf"))
    # three collinear points in one column leave the x slope unpenalized
    K = build_point_mapping(grid, [[0.1, 0.1], [0.1, 0.5], [0.1, 0.9]])
    with pytest.raises(NumericError, match="null space"):
        compute_ghat(K, build_precision(grid, "tpsmrf"), 1.0, [1.0, 2.0, 3.0])


def _dense_marginal(K, prec, lam):
    """tau2 * Sigma^{-1} from the generalized-inverse covariance, restricted to the
    complement of the mapped null space (the improper-prior marginal precision)."""
    Kd = K.toarray()
    Sigma = np.eye(K.shape[0]) + Kd @ dense_pinv(prec.Q) @ Kd.T / lam
    Si = np.linalg.inv(Sigma)
    XN = Kd @ null_space_basis(prec)
    return Si - Si @ XN @ np.linalg.solve(XN.T @ Si @ XN, XN.T @ Si)


def test_marginal_quadform_matches_dense_oracle():
    grid, K, prec, Y = _toy(6, 10)
    lam = 0.7
    V = np.random.default_rng(5).standard_normal((10, 3))
    got, logdet = marginal_quadform_and_logdet(K, prec, lam, V)
    np.testing.assert_allclose(got, _dense_marginal(K, prec, lam) @ V, rtol=1e-8, atol=1e-10)
    A = (K.T @ K + lam * prec.Q).toarray()
    assert logdet == pytest.approx(np.linalg.slogdet(A)[1], rel=1e-10)
    zero, _ = marginal_quadform_and_logdet(K, prec, lam, np.zeros(10))
    assert np.all(zero == 0)


def test_logdet_doubling_lambda():
    grid, K, prec, _ = _toy(6, 10)
    _, ld1 = marginal_quadform_and_logdet(K, prec, 0.5, np.zeros(10))
    _, ld2 = marginal_quadform_and_logdet(K, prec, 1.0, np.zeros(10))
    A2 = (K.T @ K + 1.0 * prec.Q).toarray()
    assert ld2 == pytest.approx(np.linalg.slogdet(A2)[1], rel=1e-10)
    assert 0 < ld2 - ld1 <= (grid.m - prec.c) * math.log(2) + 1e-9


def test_profile_tau_without_covariates():
    grid, K, prec, Y = _toy(6, 10)
    beta, tau2 = profile_beta_tau(K, prec, 0.7, None, Y)
    assert beta.size == 0
    P = _dense_marginal(K, prec, 0.7)
    assert tau2 == pytest.approx(Y @ P @ Y / (10 - 3), rel=1e-8)


def test_profile_tau_zero_for_null_space_data():
    grid, K, prec, _ = _toy(6, 10)
    Y = K @ (2.0 + grid.centroids() @ np.array([1.0, -3.0]))
    _, tau2 = profile_beta_tau(K, prec, 0.7, None, Y)
    assert abs(tau2) < 1e-10


def test_profile_with_covariate_matches_dense():
    grid, K, prec, Y = _toy(6, 12, family="icar")
    z = np.random.default_rng(3).standard_normal(12)
    X = z[:, None]
    beta, tau2 = profile_beta_tau(K, prec, 0.9, X, Y)
    P = _dense_marginal(K, prec, 0.9)
    b = np.linalg.solve(X.T @ P @ X, X.T @ P @ Y)
    r = Y - X @ b
    np.testing.assert_allclose(beta, b, rtol=1e-8)
    assert tau2 == pytest.approx(r @ P @ r / (12 - 1), rel=1e-8)


def test_intercept_needs_dense_path():
    grid, K, prec, Y = _toy(6, 12, family="icar")
    ones = np.ones((12, 1))
    with pytest.raises(DomainError, match="rank deficient"):
        profile_beta_tau(K, prec, 0.9, ones, Y)
    beta, tau2 = profile_beta_tau(K, prec, 0.9, ones, Y, method="dense")
    Kd = K.toarray()
    Sigma = np.eye(12) + Kd @ dense_pinv(prec.Q) @ Kd.T / 0.9
    Si = np.linalg.inv(Sigma)
    gls = (ones.T @ Si @ Y) / (ones.T @ Si @ ones)
    np.testing.assert_allclose(beta, gls.ravel(), rtol=1e-8)
    r = Y - gls[0] * 1.0
    assert tau2 == pytest.approx(r @ Si @ r / (12 - 1), rel=1e-8)


def test_dense_path_rejects_rank_deficient_x():
    grid, K, prec, Y = _toy(6, 12, family="icar")
    X = np.column_stack([np.arange(12.0), 2 * np.arange(12.0)])
    with pytest.raises(DomainError):
        profile_beta_tau(K, prec, 1.0, X, Y, method="dense")
    with pytest.raises(DomainError):
        profile_beta_tau(K, prec, 1.0, None, Y, method="lu")


@pytest.mark.parametrize("family", ["icar", "tpsmrf"])
def test_profile_loglik_equals_dense_up_to_constant(family):
    grid, K, prec, Y = _toy(8, 20, family=family)
    lams = np.exp(np.linspace(-3, 5, 7))
    sparse_ll = np.array([profile_loglik(K, prec, lam, Y) for lam in lams])
    dense_ll = np.array([dense_profile_loglik(K, prec, lam, Y) for lam in lams])
    diff = sparse_ll - dense_ll
    np.testing.assert_allclose(diff - diff[0], 0.0, atol=1e-8 * np.abs(sparse_ll).max())


def test_golden_section_and_bracketed_search():
    x, fx = golden_section_max(lambda t: -(t - 1.234) ** 2, -5, 5, tol=1e-6)
    assert x == pytest.approx(1.234, abs=1e-5)
    x, fx, at_bound = bracketed_search(lambda t: -(t - 9.9) ** 2, 0, 10, tol=1e-4)
    assert x == pytest.approx(9.9, abs=1e-3) and not at_bound
    x, _, at_bound = bracketed_search(lambda t: t, 0, 10)
    assert at_bound and x == pytest.approx(10.0)
    x, fx, _ = bracketed_search(lambda t: (t - 2.0) ** 2, -5, 5, maximize=False)
    assert x == pytest.approx(2.0, abs=1e-3) and fx == pytest.approx(0.0, abs=1e-6)


def test_maximize_lambda_matches_grid_scan():
    grid, K, prec, Y = _toy(10, 40, family="tpsmrf", seed=4)
    fit = maximize_lambda(K, prec, Y)
    assert isinstance(fit, FitResult) and fit.loglik_trace
    scan = np.linspace(-10, 20, 200)
    ll = [profile_loglik(K, prec, math.exp(s), Y) for s in scan]
    k = int(np.argmax(ll))
    assert abs(math.log(fit.hyper.lam) - scan[k]) <= scan[1] - scan[0]
    assert fit.loglik >= max(ll) - 1e-6
    assert np.all(np.isfinite(fit.ghat)) and np.all(fit.se_g >= 0)
    js = fit.to_json()
    assert set(js) >= {"lambda", "tau2", "kappa", "c", "converged_at_bound"}


def test_maximize_lambda_pure_noise_hits_upper_bound():
    rng = np.random.default_rng(8)
    grid = GridSpec.unit_square(12)
    K = build_point_mapping(grid, rng.random((200, 2)))
    Y = rng.standard_normal(200)
    fit = maximize_lambda(K, build_precision(grid, "icar"), Y)
    assert fit.converged_at_bound
    assert np.abs(fit.ghat - Y.mean()).max() < 0.1 * Y.std()


def test_maximize_lambda_bad_bounds():
    grid, K, prec, Y = _toy()
    with pytest.raises(DomainError):
        maximize_lambda(K, prec, Y, bounds=(3.0, 1.0))
    with pytest.raises(DomainError):
        maximize_lambda(K, prec, Y, bounds=(0.0, np.inf))


def test_pointwise_se_exact_matches_dense():
    grid, K, prec, Y = _toy(6, 10)
    h = Hyperparams(0.8, 0.3)
    se, method = pointwise_se(K, prec, h)
    A = (K.T @ K + 0.8 * prec.Q).toarray()
    assert method == "exact"
    np.testing.assert_allclose(se, np.sqrt(0.3 * np.diag(np.linalg.inv(A))), rtol=1e-9)


@pytest.mark.parametrize("family", ["icar", "tpsmrf"])
@pytest.mark.parametrize("areal", [False, True])
@pytest.mark.parametrize("log_lam", [-5.0, 0.0, 5.0, 12.0])
def test_pointwise_se_stochastic_within_five_percent(family, areal, log_lam):
    rng = np.random.default_rng(11)
    grid = GridSpec.unit_square(20)
    if areal:
        K = build_areal_mapping(grid, coarse_tiling(grid, 5))
    else:
        K = build_point_mapping(grid, rng.random((100, 2)))
    prec = build_precision(grid, family)
    h = Hyperparams(math.exp(log_lam), 1.0)
    system = SmoothingSystem(K, prec)
    exact, _ = pointwise_se(None, None, h, method="exact", system=system)
    approx, used = pointwise_se(None, None, h, method="stochastic", system=system)
    assert used == "stochastic"
    assert np.max(np.abs(approx / exact - 1.0)) < 0.05


def test_posterior_draws_moments():
    grid, K, prec, Y = _toy(6, 10)
    h = Hyperparams(0.8, 0.3)
    draws = posterior_draw_g(K, prec, h, Y, seed=4, size=5000)
    mean = compute_ghat(K, prec, 0.8, Y)
    cov = 0.3 * np.linalg.inv((K.T @ K + 0.8 * prec.Q).toarray())
    mc_se = np.sqrt(np.diag(cov) / 5000)
    assert np.all(np.abs(draws.mean(axis=0) - mean) < 3 * mc_se + 1e-12)
    emp = np.cov(draws.T)
    assert np.linalg.norm(emp - cov) / np.linalg.norm(cov) < 0.1


def test_posterior_draws_deterministic_and_collapse():
    grid, K, prec, Y = _toy(6, 10)
    h = Hyperparams(0.8, 1e-12)
    a = posterior_draw_g(K, prec, h, Y, seed=1)
    b = posterior_draw_g(K, prec, h, Y, seed=1)
    np.testing.assert_array_equal(a, b)
    assert np.abs(a - compute_ghat(K, prec, 0.8, Y)).max() < 1e-4


def test_posterior_draws_with_covariates():
    grid, K, prec, Y = _toy(6, 10, family="icar")
    X = np.arange(10.0)[:, None]
    h = Hyperparams(0.8, 1e-14)
    d = posterior_draw_g(K, prec, h, Y, X=X, beta=[0.5], seed=0)
    np.testing.assert_allclose(d, compute_ghat(K, prec, 0.8, Y - 0.5 * X[:, 0]), atol=1e-5)

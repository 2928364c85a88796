"""Matérn Gaussian-process baseline: correlation, simulation, kriging, fitting.

The correlation uses the ``2 * sqrt(nu) * d / rho`` scaling::

    R(d) = (2 sqrt(nu) d / rho)^nu K_nu(2 sqrt(nu) d / rho) / (Gamma(nu) 2^(nu-1))

so ``nu = 0.5`` gives ``exp(-sqrt(2) d / rho)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import minimize
from scipy.spatial.distance import cdist, pdist, squareform
from scipy.special import gammaln, kve

from .errors import DomainError, NumericError


@dataclass(frozen=True)
class MaternParams:
    nu: float
    rho: float
    sigma2: float = 1.0

    def __post_init__(self):
        vals = (self.nu, self.rho, self.sigma2)
        if not all(np.isfinite(v) and v > 0 for v in vals):
            raise DomainError(f"Matérn parameters must be finite and positive, got {self}")


def matern_corr(d, nu: float, rho: float):
    d = np.asarray(d, dtype=float)
    if not (np.isfinite(nu) and np.isfinite(rho)) or nu <= 0 or rho <= 0:
        raise DomainError(f"need nu > 0 and rho > 0, got nu={nu}, rho={rho}")
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise DomainError("distances must be finite and non-negative")
    x = 2.0 * np.sqrt(nu) * d / rho
    out = np.ones_like(x)
    pos = x > 0
    xp = x[pos]
    log_norm = gammaln(nu) + (nu - 1.0) * np.log(2.0)
    with np.errstate(under="ignore", over="ignore", divide="ignore", invalid="ignore"):
        vals = np.exp(nu * np.log(xp) - log_norm + np.log(kve(nu, xp)) - xp)
    # K_nu overflows only for x so small that R is 1 to working precision
    vals[~np.isfinite(vals)] = 1.0
    out[pos] = vals
    np.clip(out, 0.0, 1.0, out=out)
    return out if out.ndim else float(out)


class _CorrTable:
    """Piecewise-linear table of ``R`` in ``log x`` for repeated evaluation at one ``nu``.

    Used inside the likelihood optimizer, where the distances are fixed and
    only ``rho`` moves; relative error is about 1e-9.
    """

    def __init__(self, nu: float, lo: float = 1e-8, n: int = 200_001):
        self.nu = nu
        hi = 1.0
        while matern_corr(hi * nu ** -0.5 / 2.0, nu, 1.0) > 1e-300 and hi < 1e4:
            hi *= 2.0
        self.log_lo, self.log_hi = np.log(lo), np.log(hi)
        self.logx = np.linspace(self.log_lo, self.log_hi, n)
        d = np.exp(self.logx) / (2.0 * np.sqrt(nu))
        self.vals = matern_corr(d, nu, 1.0)

    def __call__(self, log_d, rho: float) -> np.ndarray:
        """Correlation at distances given by their logarithms ``log_d``."""
        lx = np.asarray(log_d, dtype=float) + np.log(2.0 * np.sqrt(self.nu) / rho)
        step = self.logx[1] - self.logx[0]
        t = np.clip((lx - self.log_lo) / step, 0.0, len(self.logx) - 1.000001)
        i = t.astype(np.intp)
        t -= i
        out = self.vals[i] * (1.0 - t) + self.vals[i + 1] * t
        out[lx < self.log_lo] = 1.0
        out[lx > self.log_hi] = 0.0
        return out


def _locs(locations) -> np.ndarray:
    a = np.asarray(locations, dtype=float)
    if a.ndim == 1:
        a = a.reshape(-1, 2)
    if a.shape[0] < 1 or not np.all(np.isfinite(a)):
        raise DomainError("need at least one finite location")
    return a


def build_corr_matrix(locations, params: MaternParams, others=None) -> np.ndarray:
    """Correlation matrix among ``locations`` (or cross-correlation with ``others``)."""
    a = _locs(locations)
    b = a if others is None else _locs(others)
    R = matern_corr(cdist(a, b), params.nu, params.rho)
    if others is None:
        R = 0.5 * (R + R.T)
        np.fill_diagonal(R, 1.0)
    return R


def cholesky_jitter(C: np.ndarray, scale: float = 1.0, escalations: int = 3):
    """Lower Cholesky factor of ``C``, adding diagonal jitter only on failure.

    Tries no jitter, then ``1e-10 * scale`` increased tenfold up to
    ``escalations`` times. Returns ``(L, jitter)``.
    """
    jitters = [0.0] + [1e-10 * scale * 10.0 ** k for k in range(escalations + 1)]
    for jit in jitters:
        try:
            A = C if jit == 0 else C + jit * np.eye(C.shape[0])
            return scipy.linalg.cholesky(A, lower=True, check_finite=False), jit
        except np.linalg.LinAlgError:
            continue
    raise NumericError(f"covariance factorization failed after jitter {jitters[-1]:.1e}")


def simulate_gp_field(locations, params: MaternParams, seed=None, size=None) -> np.ndarray:
    """Draw ``g ~ N(0, sigma2 R)`` at ``locations``; deterministic given ``seed``."""
    C = params.sigma2 * build_corr_matrix(locations, params)
    L, _ = cholesky_jitter(C, scale=params.sigma2)
    rng = np.random.default_rng(seed)
    n = C.shape[0]
    z = rng.standard_normal(n if size is None else (size, n))
    return z @ L.T if size is not None else L @ z


def _factor_or_raise(A):
    try:
        return scipy.linalg.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        cond = np.linalg.cond(A)
        raise NumericError(f"kriging system is singular (condition number ~{cond:.2e})") from None


def gp_predict(data_locs, grid_locs, params: MaternParams, tau2: float, Y,
               return_var: bool = False):
    """Kriging prediction with a GLS constant mean.

    ``ghat = mu + sigma2 R_gd (sigma2 R_dd + tau2 I)^{-1} (Y - mu)``. With
    ``return_var`` also returns the universal-kriging variance of g at each
    prediction location (mean-estimation uncertainty included).
    """
    if tau2 < 0:
        raise DomainError(f"tau2 must be >= 0, got {tau2}")
    Y = np.asarray(Y, dtype=float)
    A = params.sigma2 * build_corr_matrix(data_locs, params) + tau2 * np.eye(len(Y))
    cf = _factor_or_raise(A)
    ones = np.ones(len(Y))
    Ainv1 = scipy.linalg.cho_solve(cf, ones)
    mu = float(Ainv1 @ Y / (ones @ Ainv1))
    Cgd = params.sigma2 * build_corr_matrix(grid_locs, params, data_locs)
    ghat = mu + Cgd @ scipy.linalg.cho_solve(cf, Y - mu)
    if not return_var:
        return ghat
    W = scipy.linalg.cho_solve(cf, Cgd.T)
    u = 1.0 - Cgd @ Ainv1
    var = params.sigma2 - np.einsum("ij,ji->i", Cgd, W) + u ** 2 / (ones @ Ainv1)
    return ghat, np.maximum(var, 0.0)


@dataclass
class GPFit:
    lam: float
    tau2: float
    sigma2: float
    rho: float
    nu: float
    mu: float
    ghat: np.ndarray
    var_g: np.ndarray
    loglik: float
    trace: list = field(default_factory=list)
    at_bound: bool = False

    @property
    def se_g(self):
        return np.sqrt(self.var_g)


def _profile_nll(theta, D, corr, Y, trace):
    log_lam, log_rho = theta
    lam, rho = np.exp(log_lam), np.exp(log_rho)
    n = len(Y)
    A = squareform(corr(D, rho))
    A[np.diag_indices(n)] = 1.0
    A[np.diag_indices(n)] += lam
    try:
        cf = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        trace.append((lam, rho, -np.inf))
        return 1e300
    ones = np.ones(n)
    Ainv1 = scipy.linalg.cho_solve(cf, ones)
    mu = Ainv1 @ Y / (ones @ Ainv1)
    r = Y - mu
    s2 = r @ scipy.linalg.cho_solve(cf, r) / n
    if not s2 > 0:
        trace.append((lam, rho, -np.inf))
        return 1e300
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    ll = -0.5 * n * np.log(s2) - 0.5 * logdet
    trace.append((lam, rho, ll))
    return -ll


def gp_profile_fit(data_locs, grid_locs, nu: float, Y, domain: float | None = None,
                   log_lam_bounds=(-12.0, 10.0), starts=None) -> GPFit:
    """Maximum-likelihood Matérn fit with ``nu`` fixed.

    Optimizes the marginal likelihood over ``(log lambda, log rho)`` with
    ``lambda = tau2 / sigma2`` by bounded Nelder-Mead; ``sigma2`` and the
    constant mean are profiled out. ``rho`` is bounded to
    ``[domain / 100, 4 * domain]``.
    """
    X = _locs(data_locs)
    G = _locs(grid_locs)
    Y = np.asarray(Y, dtype=float)
    n = len(Y)
    if n < 3:
        raise DomainError(f"GP fit needs n >= 3, got {n}")
    if domain is None:
        allpts = np.vstack([X, G])
        domain = float(np.max(allpts.max(axis=0) - allpts.min(axis=0)))
        domain = domain if domain > 0 else 1.0
    rho_bounds = (np.log(domain / 100.0), np.log(4.0 * domain))
    bounds = [tuple(log_lam_bounds), rho_bounds]
    with np.errstate(divide="ignore"):
        D = np.log(pdist(X))
    corr = _CorrTable(nu)
    trace: list = []
    if starts is None:
        starts = [(np.log(0.1), np.log(0.1 * domain)), (np.log(0.1), np.log(0.5 * domain))]
    best = None
    for x0 in starts:
        res = minimize(_profile_nll, np.asarray(x0, float), args=(D, corr, Y, trace),
                       method="Nelder-Mead", bounds=bounds,
                       options={"xatol": 1e-4, "fatol": 1e-8, "maxiter": 2000})
        if np.isfinite(res.fun) and res.fun < 1e299 and (best is None or res.fun < best.fun):
            best = res
    if best is None or not best.success:
        raise NumericError("GP likelihood optimization did not converge", trace=trace)
    lam, rho = np.exp(best.x)
    # recover sigma2 and mu at the optimum
    A = build_corr_matrix(X, MaternParams(nu, rho))
    A[np.diag_indices(n)] += lam
    cf = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
    ones = np.ones(n)
    Ainv1 = scipy.linalg.cho_solve(cf, ones)
    mu = float(Ainv1 @ Y / (ones @ Ainv1))
    r = Y - mu
    sigma2 = float(r @ scipy.linalg.cho_solve(cf, r) / n)
    params = MaternParams(nu, rho, max(sigma2, 1e-300))
    ghat, var = gp_predict(X, G, params, lam * params.sigma2, Y, return_var=True)
    tol = 1e-3
    at_bound = bool(np.any(np.abs(best.x - np.array([b[0] for b in bounds])) < tol)
                    or np.any(np.abs(best.x - np.array([b[1] for b in bounds])) < tol))
    return GPFit(lam=float(lam), tau2=float(lam * params.sigma2), sigma2=params.sigma2,
                 rho=float(rho), nu=nu, mu=mu, ghat=ghat, var_g=var, loglik=-float(best.fun),
                 trace=trace, at_bound=at_bound)

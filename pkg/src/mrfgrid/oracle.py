"""Expected squared prediction error of MRF and GP smoothers.

For a linear predictor ``ghat = S Y`` of the surface ``g`` at the grid
centroids, with ``Y = g_d + e``, ``e ~ N(0, tau2 I)`` and ``(g_d, g)``
jointly Gaussian with zero mean,

    E ||S Y - g||^2 = tau2 tr(S S^T) + tr(S C_dd S^T) - 2 tr(S C_dg) + tr(C_gg)

where ``C_dd = cov(g_d)``, ``C_dg = cov(g_d, g)`` and ``C_gg = cov(g)``. When
the data sites are grid cells or areal averages, ``C_dg = K C_gg`` and
``C_dd = K C_gg K^T``. For the MRF, ``S = (K^T K + lambda Q)^{-1} K^T`` is
``m x n``, so every term needs only ``n`` sparse solves.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DomainError
from .grid import GridSpec, build_areal_mapping, build_point_mapping
from .matern import MaternParams, build_corr_matrix, cholesky_jitter
from .normal_fit import DEFAULT_LOG_LAMBDA_BOUNDS, SmoothingSystem, bracketed_search
from .precision import PrecisionMatrix, build_precision


@dataclass(frozen=True)
class GenerativeSpec:
    """Zero-mean Matérn surface observed with noise at points or areal averages.

    Exactly one of ``data_locs`` (``(n, 2)`` coordinates) and ``areas``
    (rectangles or polygons) is given.
    """

    params: MaternParams
    tau2: float
    grid: GridSpec
    data_locs: np.ndarray | None = None
    areas: tuple | None = None

    def __post_init__(self):
        if not (np.isfinite(self.tau2) and self.tau2 >= 0):
            raise DomainError(f"tau2 must be finite and >= 0, got {self.tau2}")
        if (self.data_locs is None) == (self.areas is None):
            raise DomainError("give exactly one of data_locs and areas")
        if self.data_locs is not None:
            locs = np.asarray(self.data_locs, dtype=float).reshape(-1, 2)
            object.__setattr__(self, "data_locs", locs)

    @property
    def areal(self) -> bool:
        return self.areas is not None

    @property
    def n(self) -> int:
        return len(self.areas) if self.areal else len(self.data_locs)

    def mapping(self):
        if self.areal:
            return build_areal_mapping(self.grid, self.areas)
        return build_point_mapping(self.grid, self.data_locs)

    def covariance_blocks(self, K=None, chunk: int = 2048):
        """Return ``(trace C_gg, C_dd, C_dg)``.

        Point data use the exact site coordinates; areal data average the
        centroid covariance through ``K``. ``C_gg`` itself is never formed.
        """
        s2 = self.params.sigma2
        cent = self.grid.centroids()
        tr_gg = s2 * self.grid.m
        if not self.areal:
            C_dd = s2 * build_corr_matrix(self.data_locs, self.params)
            C_dg = s2 * build_corr_matrix(self.data_locs, self.params, cent)
            return tr_gg, C_dd, C_dg
        K = self.mapping() if K is None else K
        C_dg = np.empty((K.shape[0], self.grid.m))
        for start in range(0, self.grid.m, chunk):
            stop = min(start + chunk, self.grid.m)
            block = s2 * build_corr_matrix(cent, self.params, cent[start:stop])
            C_dg[:, start:stop] = K @ block
        C_dd = np.asarray((K @ C_dg.T))
        C_dd = 0.5 * (C_dd + C_dd.T)
        return tr_gg, C_dd, C_dg


def smoother_matrix(system: SmoothingSystem, lam: float) -> np.ndarray:
    """Dense ``m x n`` smoother ``(K^T K + lambda Q)^{-1} K^T``."""
    return system.factor(lam).solve(system.K.T.toarray())


def _sse_from_smoother(S, tau2, tr_gg, C_dd, C_dg) -> float:
    noise = tau2 * float(np.sum(S * S))
    signal = float(np.sum((S @ C_dd) * S))
    cross = float(np.sum(S * C_dg.T))
    return noise + signal - 2.0 * cross + tr_gg


def expected_sse_mrf(K, Q, lam: float, C, tau2: float, C_dg=None, C_dd=None, c=None,
                     system: SmoothingSystem | None = None) -> float:
    """Expected SSE of the MRF smoother at the grid cells.

    Parameters
    ----------
    K : sparse (n, m)
        Mapping matrix.
    Q : PrecisionMatrix
        Prior precision (``c`` needed for a bare sparse matrix).
    lam : float
        Smoothing parameter.
    C : ndarray (m, m) or float
        Covariance of ``g`` at the grid cells, or just its trace when
        ``C_dg`` and ``C_dd`` are supplied.
    tau2 : float
        Noise variance of the generating model.
    C_dg, C_dd : ndarray, optional
        Covariance blocks for continuous data sites. Default ``K C`` and
        ``K C K^T``.
    """
    system = system or SmoothingSystem(K, Q, c)
    if np.ndim(C) == 0:
        tr_gg = float(C)
        if C_dg is None or C_dd is None:
            raise DomainError("a scalar C (trace only) needs explicit C_dg and C_dd")
    else:
        C = np.asarray(C, dtype=float)
        tr_gg = float(np.trace(C))
        if C_dg is None:
            C_dg = np.asarray(system.K @ C)
        if C_dd is None:
            C_dd = np.asarray(system.K @ C_dg.T)
    return _sse_from_smoother(smoother_matrix(system, lam), tau2, tr_gg, C_dd, C_dg)


def gp_weights(data_locs, grid_locs, params: MaternParams, lam: float) -> np.ndarray:
    """Known-mean kriging weights ``R_gd (R_dd + lambda I)^{-1}`` (``m x n``)."""
    R_dd = build_corr_matrix(data_locs, params)
    R_dd[np.diag_indices_from(R_dd)] += lam
    L, _ = cholesky_jitter(R_dd)
    R_gd = build_corr_matrix(grid_locs, params, data_locs)
    return scipy.linalg.cho_solve((L, True), R_gd.T).T


def expected_sse_gp(data_locs, grid_locs, params: MaternParams, tau2: float,
                    lambda_true: float | None = None) -> float:
    """Expected SSE at ``grid_locs`` of the known-parameter kriging predictor.

    The predictor is ``R_gd (R_dd + lambda I)^{-1} Y`` with the mean known to
    be zero. ``lambda_true`` defaults to ``tau2 / sigma2``; then the result
    reduces to ``tr(C_gg) - tr(C_gd (C_dd + tau2 I)^{-1} C_dg)``.
    """
    lam = tau2 / params.sigma2 if lambda_true is None else float(lambda_true)
    if not (np.isfinite(lam) and lam >= 0):
        raise DomainError(f"lambda must be finite and >= 0, got {lam}")
    s2 = params.sigma2
    W = gp_weights(data_locs, grid_locs, params, lam)
    C_dd = s2 * build_corr_matrix(data_locs, params)
    C_dg = s2 * build_corr_matrix(data_locs, params, grid_locs)
    m = np.asarray(grid_locs).reshape(-1, 2).shape[0]
    return _sse_from_smoother(W, tau2, s2 * m, C_dd, C_dg)


@dataclass(frozen=True)
class OracleResult:
    lam: float
    sse: float
    at_bound: bool

    @property
    def log_lam(self) -> float:
        return math.log(self.lam)


def oracle_lambda(K, Q, C, tau2: float, bounds=DEFAULT_LOG_LAMBDA_BOUNDS, C_dg=None,
                  C_dd=None, c=None, tol: float = 1e-3, n_scan: int = 25,
                  system: SmoothingSystem | None = None) -> OracleResult:
    """Minimize `expected_sse_mrf` over ``log lambda`` within ``bounds``."""
    lo, hi = map(float, bounds)
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise DomainError(f"bounds must be finite with lo < hi, got {bounds}")
    system = system or SmoothingSystem(K, Q, c)
    if np.ndim(C) == 0:
        tr_gg = float(C)
    else:
        C = np.asarray(C, dtype=float)
        tr_gg = float(np.trace(C))
        C_dg = np.asarray(system.K @ C) if C_dg is None else C_dg
        C_dd = np.asarray(system.K @ C_dg.T) if C_dd is None else C_dd

    def sse(log_lam):
        S = smoother_matrix(system, math.exp(log_lam))
        return _sse_from_smoother(S, tau2, tr_gg, C_dd, C_dg)

    x, fx, at_bound = bracketed_search(sse, lo, hi, n_scan=n_scan, tol=tol, maximize=False)
    return OracleResult(math.exp(x), float(fx), at_bound)


def _joint_factor(spec: GenerativeSpec):
    """Cholesky factor over data sites followed by centroids (points only)."""
    sites = np.vstack([spec.data_locs, spec.grid.centroids()])
    C = spec.params.sigma2 * build_corr_matrix(sites, spec.params)
    L, _ = cholesky_jitter(C, scale=spec.params.sigma2)
    return L


def mc_sse_estimate(spec: GenerativeSpec, fit_family, lam: float, n_reps: int, seed=None,
                    batch: int = 250):
    """Monte Carlo mean and standard error of ``||ghat - g||^2`` at the centroids.

    ``fit_family`` is a precision family name, a `PrecisionMatrix`, or
    ``"gp"`` for the known-parameter kriging predictor with ratio ``lam``.
    Point data draw ``g`` jointly at the data sites and centroids; areal
    data draw ``g`` at the centroids and average it through ``K``.
    """
    if n_reps < 2:
        raise DomainError(f"n_reps must be >= 2, got {n_reps}")
    rng = np.random.default_rng(seed)
    grid = spec.grid
    m, n = grid.m, spec.n
    K = spec.mapping()
    if isinstance(fit_family, str) and fit_family.lower() == "gp":
        if spec.areal:
            raise DomainError("the GP oracle is only defined for point data")
        W = gp_weights(spec.data_locs, grid.centroids(), spec.params, lam)
        predict = lambda Y: W @ Y
    else:
        prec = fit_family if isinstance(fit_family, PrecisionMatrix) else \
            build_precision(grid, fit_family)
        f = SmoothingSystem(K, prec).factor(lam)
        predict = lambda Y: f.solve(K.T @ Y)
    if spec.areal:
        L = cholesky_jitter(spec.params.sigma2 * build_corr_matrix(grid.centroids(),
                                                                   spec.params),
                            scale=spec.params.sigma2)[0]
    else:
        L = _joint_factor(spec)
    sse = np.empty(n_reps)
    tau = math.sqrt(spec.tau2)
    for start in range(0, n_reps, batch):
        k = min(batch, n_reps - start)
        Z = L @ rng.standard_normal((L.shape[0], k))
        if spec.areal:
            g = Z
            gd = K @ g
        else:
            gd, g = Z[:n], Z[n:]
        Y = gd + tau * rng.standard_normal((n, k))
        sse[start:start + k] = np.sum((predict(Y) - g) ** 2, axis=0)
    return float(sse.mean()), float(sse.std(ddof=1) / math.sqrt(n_reps))


ORACLE_FIELDS = ["family", "nu", "rho", "tau2", "scenario", "lambda_star", "sse", "sse_se"]


def write_oracle_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ORACLE_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in ORACLE_FIELDS})

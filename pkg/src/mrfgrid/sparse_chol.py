"""Sparse LDL^T factorization with a reusable fill-reducing ordering.

SuperLU run in symmetric mode with no pivoting on a symmetrically permuted
SPD matrix is an LDL^T factorization (``U = D L^T``). The ordering is
computed once per sparsity pattern and reused for every refactorization,
which is what the smoothing-parameter search needs.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu, spsolve_triangular

from .errors import NumericError

_SYM_OPTS = dict(SymmetricMode=True)


class SymbolicOrdering:
    """Minimum-degree ordering for a fixed symmetric sparsity pattern."""

    def __init__(self, pattern: sp.spmatrix):
        P = sp.csc_matrix(pattern, dtype=float, copy=True)
        P.data = np.abs(P.data) + 1.0
        P = P + sp.diags(np.asarray(abs(P).sum(axis=1)).ravel() + 1.0)
        lu = splu(P.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                  options=_SYM_OPTS)
        self.perm = np.argsort(lu.perm_c)
        self.iperm = np.argsort(self.perm)
        self.m = P.shape[0]

    def factor(self, A: sp.spmatrix) -> "LDLFactor":
        return LDLFactor(A, self)


class LDLFactor:
    """``P A P^T = L D L^T`` for symmetric positive definite ``A``."""

    def __init__(self, A: sp.spmatrix, ordering: SymbolicOrdering | None = None):
        A = sp.csc_matrix(A)
        if ordering is None:
            ordering = SymbolicOrdering(A)
        self.ordering = ordering
        p = ordering.perm
        B = A[p][:, p].tocsc()
        try:
            lu = splu(B, permc_spec="NATURAL", diag_pivot_thresh=0.0, options=_SYM_OPTS)
        except RuntimeError as exc:
            raise NumericError(f"sparse factorization failed: {exc}") from None
        natural = np.arange(B.shape[0])
        if not (np.array_equal(lu.perm_r, natural) and np.array_equal(lu.perm_c, natural)):
            raise NumericError("sparse factorization pivoted; matrix is not positive definite")
        d = lu.U.diagonal()
        if not np.all(np.isfinite(d)) or np.any(d <= 0):
            k = int(np.flatnonzero(~(d > 0))[0]) if np.any(~(d > 0)) else -1
            raise NumericError(f"matrix is not positive definite (pivot {k} = {d[k]:.3g}); "
                               "check that every null-space direction is observed")
        self._lu = lu
        self.d = d
        self.m = B.shape[0]
        self._L = None

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        p, ip = self.ordering.perm, self.ordering.iperm
        x = self._lu.solve(np.ascontiguousarray(b[p]))
        return x[ip]

    def logdet(self) -> float:
        return float(np.sum(np.log(self.d)))

    def _lower(self):
        if self._L is None:
            self._L = sp.csr_matrix(self._lu.L)
        return self._L

    def solve_lt_sqrt(self, z: np.ndarray) -> np.ndarray:
        """Return ``x = P^T L^{-T} D^{-1/2} z`` so that cov(x) = A^{-1} for white z."""
        z = np.asarray(z, dtype=float)
        scaled = z / (np.sqrt(self.d) if z.ndim == 1 else np.sqrt(self.d)[:, None])
        LT = self._lower().T.tocsr()
        y = spsolve_triangular(LT, scaled, lower=False, unit_diagonal=True)
        return y[self.ordering.iperm]

"""Inverse-eigenvalue curves and equivalent kernels for MRF and GP smoothers.

Eigencurves order the inverse eigenvalues of a precision matrix (or the
eigenvalues of a correlation matrix) from largest to smallest and rescale
them so that one chosen position equals one, which removes the arbitrary
overall precision scale.

Equivalent kernels are rows of the smoothing matrix obtained with one
observation per cell: ``S = (lambda Q + I)^{-1}`` for an MRF and
``S = R (R + lambda I)^{-1}`` for a GP with correlation matrix ``R``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import DomainError, NumericError, SizeError
from .grid import GridSpec
from .matern import MaternParams, build_corr_matrix, cholesky_jitter
from .precision import PrecisionMatrix

DENSE_GUARD = 6400


@dataclass(frozen=True)
class EigenCurve:
    values: np.ndarray
    normalize_index: int
    label: str
    n_excluded: int = 0

    def log_values(self) -> np.ndarray:
        return np.log(self.values)


@dataclass(frozen=True)
class KernelSlice:
    """One row of an equivalent-kernel smoothing matrix.

    ``cross_x`` and ``cross_y`` are ``(offsets, weights)`` pairs along the
    row and column through the focal cell, with offsets in cells.
    """

    focal: int
    weights: np.ndarray
    lam: float
    grid: GridSpec
    label: str = ""

    def image(self) -> np.ndarray:
        return self.weights.reshape(self.grid.shape)

    @property
    def cross_x(self):
        row, col = divmod(self.focal, self.grid.nx)
        return np.arange(self.grid.nx) - col, self.image()[row, :].copy()

    @property
    def cross_y(self):
        row, col = divmod(self.focal, self.grid.nx)
        return np.arange(self.grid.ny) - row, self.image()[:, col].copy()

    def neighbour_weights(self) -> np.ndarray:
        """Weights of the (up to four) cardinal neighbours of the focal cell."""
        row, col = divmod(self.focal, self.grid.nx)
        img = self.image()
        out = []
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            r, c = row + dr, col + dc
            if 0 <= r < self.grid.ny and 0 <= c < self.grid.nx:
                out.append(img[r, c])
        return np.array(out)

    def spike(self) -> float:
        """Focal weight minus the mean of its cardinal neighbours."""
        return float(self.weights[self.focal] - self.neighbour_weights().mean())

    def mass_beyond(self, radius: float) -> float:
        """Total absolute weight at centroid distance > ``radius`` cells."""
        rows, cols = np.divmod(np.arange(self.grid.m), self.grid.nx)
        r0, c0 = divmod(self.focal, self.grid.nx)
        d = np.hypot(rows - r0, cols - c0)
        return float(np.abs(self.weights[d > radius]).sum())


def _scale_curve(desc: np.ndarray, normalize_index: int, max_index, label, excluded):
    if not 1 <= normalize_index <= len(desc):
        raise DomainError(f"normalize_index {normalize_index} outside 1..{len(desc)}")
    values = desc / desc[normalize_index - 1]
    values[normalize_index - 1] = 1.0
    if max_index is not None:
        values = values[:int(max_index)]
    return EigenCurve(values, normalize_index, label, excluded)


def eigencurve_mrf(prec: PrecisionMatrix, normalize_index: int = 100, max_index=None,
                   guard: int = DENSE_GUARD, rtol: float = 1e-8) -> EigenCurve:
    """Scaled, descending inverse eigenvalues of ``Q``.

    Eigenvalues below ``rtol`` times the largest are treated as zero and
    excluded (their inverses are infinite).
    """
    Q = prec.Q if isinstance(prec, PrecisionMatrix) else sp.csr_matrix(prec)
    m = Q.shape[0]
    if m > guard:
        raise SizeError(f"dense eigensolve on m={m} cells exceeds the guard of {guard}; "
                        "use a smaller grid")
    ev = scipy.linalg.eigh(Q.toarray(), eigvals_only=True)
    zero = ev < rtol * ev[-1]
    inv = 1.0 / ev[~zero]
    label = prec.label() if isinstance(prec, PrecisionMatrix) else "custom"
    return _scale_curve(np.sort(inv)[::-1], normalize_index, max_index, label, int(zero.sum()))


def eigencurve_gp(locations, params: MaternParams, normalize_index: int = 100, max_index=None,
                  guard: int = DENSE_GUARD) -> EigenCurve:
    """Scaled, descending eigenvalues of the Matérn correlation matrix."""
    locs = np.asarray(locations, dtype=float).reshape(-1, 2)
    if len(locs) > guard:
        raise SizeError(f"dense eigensolve on {len(locs)} locations exceeds the guard of "
                        f"{guard}; use a smaller grid")
    ev = scipy.linalg.eigh(build_corr_matrix(locs, params), eigvals_only=True)[::-1]
    # round-off can leave tiny negative eigenvalues at the smooth end
    ev = np.maximum(ev, np.finfo(float).tiny)
    return _scale_curve(ev.copy(), normalize_index, max_index,
                        f"matern:nu={params.nu:g},rho={params.rho:g}", 0)


def projected_curve(prec: PrecisionMatrix, basis: np.ndarray, normalize_index: int = 100,
                    max_index=None, rtol: float = 1e-8) -> EigenCurve:
    """Inverse Rayleigh quotients ``1 / (v^T Q v)`` over the columns of ``basis``.

    With ``basis`` the ICAR eigenvectors (ascending eigenvalue order) this
    puts every family on a common set of spatial modes. Columns that ``Q``
    annihilates are dropped.
    """
    QV = prec.Q @ basis
    rq = np.einsum("ij,ij->j", basis, QV) / np.einsum("ij,ij->j", basis, basis)
    keep = rq > rtol * rq.max()
    return _scale_curve(1.0 / rq[keep], normalize_index, max_index,
                        f"{prec.label()}|projected", int((~keep).sum()))


def icar_eigenvectors(grid: GridSpec, guard: int = DENSE_GUARD) -> np.ndarray:
    from .precision import build_icar

    if grid.m > guard:
        raise SizeError(f"dense eigensolve on m={grid.m} cells exceeds the guard of {guard}")
    return scipy.linalg.eigh(build_icar(grid).Q.toarray())[1]


def _focal_index(grid: GridSpec, focal):
    if focal is None:
        return (grid.ny // 2) * grid.nx + grid.nx // 2
    focal = int(focal)
    if not 0 <= focal < grid.m:
        raise DomainError(f"focal cell {focal} outside 0..{grid.m - 1}")
    return focal


def equivalent_kernel_mrf(prec: PrecisionMatrix, lam: float, focal=None) -> KernelSlice:
    """Row ``focal`` of ``(lambda Q + I)^{-1}``; defaults to the central cell."""
    if not (np.isfinite(lam) and lam > 0):
        raise DomainError(f"lambda must be finite and positive, got {lam}")
    if prec.grid is None:
        raise DomainError("equivalent kernels need a grid-tagged precision matrix")
    focal = _focal_index(prec.grid, focal)
    A = (lam * prec.Q + sp.identity(prec.m)).tocsc()
    e = np.zeros(prec.m)
    e[focal] = 1.0
    w = splu(A).solve(e)
    return KernelSlice(focal, w, float(lam), prec.grid, prec.label())


def equivalent_kernel_gp(grid: GridSpec, params: MaternParams, lam: float, focal=None,
                         guard: int = DENSE_GUARD) -> KernelSlice:
    """Row ``focal`` of ``R (R + lambda I)^{-1}`` at the grid centroids."""
    if not (np.isfinite(lam) and lam > 0):
        raise DomainError(f"lambda must be finite and positive, got {lam}")
    if grid.m > guard:
        raise SizeError(f"dense GP kernel on m={grid.m} cells exceeds the guard of {guard}")
    focal = _focal_index(grid, focal)
    R = build_corr_matrix(grid.centroids(), params)
    A = R.copy()
    A[np.diag_indices_from(A)] += lam
    try:
        L, _ = cholesky_jitter(A, scale=1.0)
    except NumericError as exc:
        raise NumericError(f"GP kernel system: {exc}") from None
    w = scipy.linalg.cho_solve((L, True), R[:, focal])
    return KernelSlice(focal, w, float(lam), grid, f"matern:nu={params.nu:g},rho={params.rho:g}")


def write_curve_csv(curve: EigenCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "scaled_inv_eigenvalue"])
        for i, v in enumerate(curve.values, start=1):
            w.writerow([i, repr(float(v))])


def write_cross_section_csv(kernel: KernelSlice, path, axis: str = "x") -> None:
    offsets, weights = kernel.cross_x if axis == "x" else kernel.cross_y
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["offset", "weight"])
        for o, v in zip(offsets, weights):
            w.writerow([int(o), repr(float(v))])


def write_kernel_image_csv(kernel: KernelSlice, path) -> None:
    img = kernel.image()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "weight"])
        for r in range(img.shape[0]):
            for c in range(img.shape[1]):
                w.writerow([r, c, repr(float(img[r, c]))])

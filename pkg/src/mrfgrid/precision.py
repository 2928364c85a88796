"""Intrinsic MRF precision matrices on a regular grid.

Four families are provided:

* ``icar``  : cardinal 4-neighbour structure, unit weights.
* ``hicar`` : unit weights for every cell within ``max_dist`` cell widths.
* ``dicar`` : distance-decaying weights ``d ** (log 0.05 / log r)`` for ``d <= r``.
* ``tpsmrf``: ``D.T @ D`` for stacked second-difference operators, a
  discretized thin plate spline roughness penalty.

All four have zero row sums; ``c`` is the dimension of the null space
(1 for the CAR variants, 3 for the thin plate spline: constant, x, y).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import DomainError
from .grid import GridSpec

FAMILIES = ("icar", "hicar", "dicar", "tpsmrf")


@dataclass(frozen=True)
class PrecisionMatrix:
    Q: sp.csr_matrix
    family: str
    c: int
    grid: GridSpec | None = None
    params: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.Q.shape[0]

    def __mul__(self, scale):
        return PrecisionMatrix((self.Q * float(scale)).tocsr(), self.family, self.c,
                               self.grid, dict(self.params))

    __rmul__ = __mul__

    def label(self) -> str:
        if self.family == "hicar":
            return f"hicar:{self.params['max_dist']:g}"
        if self.family == "dicar":
            return f"dicar:{self.params['r']:g}"
        return self.family


def _neighbour_offsets(max_dist: float, aspect: float):
    """Lattice offsets (drow, dcol) with 0 < distance <= max_dist.

    Distance is in units of the x cell width; ``aspect = dy / dx``.
    """
    reach_c = int(math.floor(max_dist))
    reach_r = int(math.floor(max_dist / aspect))
    out = []
    for a in range(-reach_r, reach_r + 1):
        for b in range(-reach_c, reach_c + 1):
            if a == 0 and b == 0:
                continue
            d = math.hypot(a * aspect, b)
            if d <= max_dist * (1 + 1e-12):
                out.append((a, b, d))
    return out


def _weighted_car(grid: GridSpec, offsets, weight_fn) -> sp.csr_matrix:
    nx, ny = grid.nx, grid.ny
    rows, cols = np.divmod(np.arange(grid.m), nx)
    I, J, W = [], [], []
    for a, b, d in offsets:
        r2, c2 = rows + a, cols + b
        ok = (r2 >= 0) & (r2 < ny) & (c2 >= 0) & (c2 < nx)
        I.append(np.flatnonzero(ok))
        J.append(r2[ok] * nx + c2[ok])
        W.append(np.full(ok.sum(), weight_fn(d)))
    I, J, W = np.concatenate(I), np.concatenate(J), np.concatenate(W)
    A = sp.csr_matrix((W, (I, J)), shape=(grid.m, grid.m))
    A = 0.5 * (A + A.T)  # exact symmetry; entries are already symmetric
    deg = np.asarray(A.sum(axis=1)).ravel()
    return (sp.diags(deg) - A).tocsr()


def build_icar(grid: GridSpec) -> PrecisionMatrix:
    Q = _weighted_car(grid, [(-1, 0, 1.0), (1, 0, 1.0), (0, -1, 1.0), (0, 1, 1.0)],
                      lambda d: 1.0)
    return PrecisionMatrix(Q, "icar", 1, grid, {})


def build_hicar(grid: GridSpec, max_dist: float) -> PrecisionMatrix:
    """Unit-weight neighbourhood of every cell whose centroid is within ``max_dist``.

    ``max_dist`` is measured in cell widths between centroids; ``max_dist=1``
    reproduces `build_icar`.
    """
    if not max_dist >= 1:
        raise DomainError(f"HICAR max_dist must be >= 1, got {max_dist}")
    offsets = _neighbour_offsets(max_dist, grid.dy / grid.dx)
    Q = _weighted_car(grid, offsets, lambda d: 1.0)
    return PrecisionMatrix(Q, "hicar", 1, grid, {"max_dist": float(max_dist)})


def dicar_weight(d, r: float):
    """Neighbour weight ``d ** (log 0.05 / log r)``; equals 1 at d=1 and 0.05 at d=r."""
    if not r > 1:
        raise DomainError(f"DICAR r must be > 1, got {r}")
    return np.power(d, math.log(0.05) / math.log(r))


def build_dicar(grid: GridSpec, r: float) -> PrecisionMatrix:
    if not r > 1:
        raise DomainError(f"DICAR r must be > 1, got {r}")
    offsets = _neighbour_offsets(r, grid.dy / grid.dx)
    Q = _weighted_car(grid, offsets, lambda d: float(dicar_weight(d, r)))
    return PrecisionMatrix(Q, "dicar", 1, grid, {"r": float(r)})


def second_difference_operator(nx: int, ny: int) -> sp.csr_matrix:
    """Stack of second differences on an ``ny x nx`` row-major grid.

    Rows: every interior x second difference, every interior y second
    difference, and sqrt(2) times every mixed (2x2) difference, so that
    ``D.T @ D`` discretizes the integral of g_xx^2 + 2 g_xy^2 + g_yy^2.
    With ``ny == 1`` only the x differences exist (second-order random walk).
    """
    idx = np.arange(nx * ny).reshape(ny, nx)
    blocks = []

    def rows_from(terms, n_rows):
        I = np.concatenate([np.arange(n_rows)] * len(terms))
        J = np.concatenate([t[0].ravel() for t in terms])
        V = np.concatenate([np.full(n_rows, t[1]) for t in terms])
        return sp.csr_matrix((V, (I, J)), shape=(n_rows, nx * ny))

    if nx >= 3:
        c = idx[:, 1:-1]
        blocks.append(rows_from([(idx[:, :-2], 1.0), (c, -2.0), (idx[:, 2:], 1.0)], c.size))
    if ny >= 3:
        c = idx[1:-1, :]
        blocks.append(rows_from([(idx[:-2, :], 1.0), (c, -2.0), (idx[2:, :], 1.0)], c.size))
    if nx >= 2 and ny >= 2:
        a = idx[:-1, :-1]
        s = math.sqrt(2.0)
        blocks.append(rows_from([(a, s), (idx[:-1, 1:], -s), (idx[1:, :-1], -s),
                                 (idx[1:, 1:], s)], a.size))
    return sp.vstack(blocks).tocsr()


def build_tpsmrf(grid: GridSpec) -> PrecisionMatrix:
    """Thin plate spline MRF: interior stencil 20 / -8 / +2 / +1."""
    if grid.nx < 4 or grid.ny < 4:
        raise DomainError(f"TPS-MRF needs nx, ny >= 4 for second differences, "
                          f"got {grid.nx}x{grid.ny}")
    D = second_difference_operator(grid.nx, grid.ny)
    Q = (D.T @ D).tocsr()
    Q.data = np.round(Q.data, 12)  # integer stencil; strip rounding residue
    Q.eliminate_zeros()
    return PrecisionMatrix(Q, "tpsmrf", 3, grid, {})


def build_precision(grid: GridSpec, family: str, param: float | None = None) -> PrecisionMatrix:
    """Dispatch on family name; ``param`` is max_dist (hicar) or r (dicar)."""
    family = family.lower().replace("-", "")
    if family == "icar":
        return build_icar(grid)
    if family == "tpsmrf" or family == "tps":
        return build_tpsmrf(grid)
    if family == "hicar":
        return build_hicar(grid, 3.0 if param is None else param)
    if family == "dicar":
        return build_dicar(grid, 5.0 if param is None else param)
    raise DomainError(f"unknown precision family {family!r}; expected one of {FAMILIES}")


def parse_family(token: str) -> tuple[str, float | None]:
    """Parse ``'hicar:3'`` style tokens into (family, param)."""
    name, _, arg = token.strip().partition(":")
    name = name.lower().replace("-", "")
    if name == "tps":
        name = "tpsmrf"
    if name not in FAMILIES:
        raise DomainError(f"unknown precision family {token!r}")
    try:
        return name, (float(arg) if arg else None)
    except ValueError:
        raise DomainError(f"bad family parameter in {token!r}") from None


def null_space_dim(prec: PrecisionMatrix) -> int:
    return prec.c


def count_zero_eigenvalues(prec: PrecisionMatrix | sp.spmatrix, rtol: float = 1e-8) -> int:
    """Eigenvalues below ``rtol * max eigenvalue`` from a dense eigensolve."""
    Q = prec.Q if isinstance(prec, PrecisionMatrix) else prec
    ev = scipy.linalg.eigvalsh(Q.toarray())
    return int(np.sum(ev < rtol * ev.max()))


def pseudo_inverse(Q, rtol: float = 1e-8) -> np.ndarray:
    """Dense eigendecomposition pseudo-inverse, zeroing eigenvalues below rtol * max."""
    Q = Q.Q if isinstance(Q, PrecisionMatrix) else Q
    Qd = Q.toarray() if sp.issparse(Q) else np.asarray(Q)
    ev, vec = scipy.linalg.eigh(Qd)
    keep = ev > rtol * ev.max()
    return (vec[:, keep] / ev[keep]) @ vec[:, keep].T


def null_space_basis(prec: PrecisionMatrix) -> np.ndarray:
    """Analytic null-space basis: constants, plus centroid x and y for TPS-MRF."""
    grid = prec.grid
    ones = np.ones((prec.m, 1))
    if prec.c == 1:
        return ones
    return np.column_stack([ones, grid.centroids()])


def write_triplets(prec: PrecisionMatrix, path) -> None:
    """Write ``i j value`` lines (upper triangle incl. diagonal) plus a JSON sidecar."""
    U = sp.triu(prec.Q).tocoo()
    order = np.lexsort((U.col, U.row))
    with open(path, "w") as fh:
        for i, j, v in zip(U.row[order], U.col[order], U.data[order]):
            fh.write(f"{i} {j} {v:.17g}\n")
    sidecar = {"family": prec.family, "m": prec.m, "c": prec.c,
               "grid": prec.grid.to_dict() if prec.grid else None, "params": prec.params}
    with open(f"{path}.json", "w") as fh:
        json.dump(sidecar, fh, indent=2)


def read_triplets(path) -> PrecisionMatrix:
    with open(f"{path}.json") as fh:
        meta = json.load(fh)
    data = np.loadtxt(path, ndmin=2)
    m = int(meta["m"])
    i, j, v = data[:, 0].astype(int), data[:, 1].astype(int), data[:, 2]
    U = sp.csr_matrix((v, (i, j)), shape=(m, m))
    Q = (U + sp.triu(U, k=1).T).tocsr()
    grid = GridSpec.from_dict(meta["grid"]) if meta.get("grid") else None
    return PrecisionMatrix(Q, meta["family"], int(meta["c"]), grid, meta.get("params", {}))

"""Fine regular grid geometry and observation-to-cell mapping matrices.

Cells are indexed row-major: ``index = row * nx + col`` with row 0 at the
bottom (``y0``) and column 0 at the left (``x0``). A cell owns the half-open
box ``[left, right) x [bottom, top)``; points on the global right/top edge
belong to the last column/row.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DomainError


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    x0: float = 0.0
    y0: float = 0.0
    dx: float = 1.0
    dy: float = 1.0

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny:
            raise DomainError(f"nx, ny must be integers, got {self.nx}, {self.ny}")
        if self.nx < 2 or self.ny < 2:
            raise DomainError(f"grid needs nx, ny >= 2, got {self.nx}x{self.ny}")
        if not (self.dx > 0 and self.dy > 0) or not np.isfinite([self.dx, self.dy]).all():
            raise DomainError(f"cell widths must be positive, got dx={self.dx}, dy={self.dy}")
        if not np.isfinite([self.x0, self.y0]).all():
            raise DomainError("grid origin must be finite")

    @classmethod
    def unit_square(cls, nx: int, ny: int | None = None) -> "GridSpec":
        ny = nx if ny is None else ny
        return cls(nx=nx, ny=ny, x0=0.0, y0=0.0, dx=1.0 / nx, dy=1.0 / ny)

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        try:
            return cls(nx=int(d["nx"]), ny=int(d["ny"]), x0=float(d.get("x0", 0.0)),
                       y0=float(d.get("y0", 0.0)), dx=float(d["dx"]), dy=float(d["dy"]))
        except KeyError as exc:
            raise DomainError(f"grid spec missing key {exc}") from None

    def to_dict(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "x0": self.x0, "y0": self.y0,
                "dx": self.dx, "dy": self.dy}

    @property
    def m(self) -> int:
        return self.nx * self.ny

    @property
    def x1(self) -> float:
        return self.x0 + self.nx * self.dx

    @property
    def y1(self) -> float:
        return self.y0 + self.ny * self.dy

    @property
    def shape(self) -> tuple[int, int]:
        """(rows, cols) for reshaping a length-m vector into an image."""
        return (self.ny, self.nx)

    def row_col(self, index):
        index = np.asarray(index)
        return index // self.nx, index % self.nx

    def centroids(self) -> np.ndarray:
        """(m, 2) array of cell centroids in row-major order."""
        rows, cols = np.divmod(np.arange(self.m), self.nx)
        return np.column_stack([self.x0 + (cols + 0.5) * self.dx,
                                self.y0 + (rows + 0.5) * self.dy])

    def contains(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return (x >= self.x0) & (x <= self.x1) & (y >= self.y0) & (y <= self.y1)


@dataclass(frozen=True)
class PointObs:
    x: float
    y: float
    value: float


@dataclass(frozen=True)
class ArealObs:
    """An areal observation.

    ``region`` is either a 4-tuple ``(xmin, ymin, xmax, ymax)`` for an
    axis-aligned rectangle or a sequence of ``(x, y)`` polygon vertices.
    """

    region: tuple
    value: float

    @property
    def is_rectangle(self) -> bool:
        r = self.region
        return len(r) == 4 and all(np.isscalar(v) for v in r)


def _cells_1d(v, origin, width, n, axis_name):
    v = np.asarray(v, dtype=float)
    bad = ~np.isfinite(v) | (v < origin) | (v > origin + n * width)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DomainError(f"{axis_name}={v.flat[i]!r} outside grid range "
                          f"[{origin}, {origin + n * width}]")
    t = (v - origin) / width
    # snap values within rounding error of a cell edge onto that edge
    near = np.abs(t - np.round(t)) < 1e-9
    t = np.where(near, np.round(t), t)
    return np.clip(np.floor(t).astype(np.int64), 0, n - 1)


def cell_index(grid: GridSpec, x, y):
    """Row-major index of the cell containing ``(x, y)``.

    Works elementwise on arrays. Raises `DomainError` naming the first
    offending coordinate if any point is outside the grid.
    """
    col = _cells_1d(x, grid.x0, grid.dx, grid.nx, "x")
    row = _cells_1d(y, grid.y0, grid.dy, grid.ny, "y")
    idx = row * grid.nx + col
    return int(idx) if np.ndim(idx) == 0 else idx


def _as_xy(points) -> np.ndarray:
    if len(points) == 0:
        return np.zeros((0, 2))
    if isinstance(points[0], PointObs):
        return np.array([[p.x, p.y] for p in points], dtype=float)
    return np.asarray(points, dtype=float).reshape(-1, 2)


def build_point_mapping(grid: GridSpec, points) -> sp.csr_matrix:
    """Mapping matrix with a single 1 per row at the containing cell.

    ``points`` may be a list of `PointObs` or an ``(n, 2)`` coordinate array.
    """
    xy = _as_xy(points)
    n = xy.shape[0]
    cols = np.empty(n, dtype=np.int64)
    for i in range(n):
        try:
            cols[i] = cell_index(grid, xy[i, 0], xy[i, 1])
        except DomainError as exc:
            raise DomainError(f"point row {i}: {exc}") from None
    return sp.csr_matrix((np.ones(n), (np.arange(n), cols)), shape=(n, grid.m))


def _rect_overlap_row(grid: GridSpec, rect):
    xmin, ymin, xmax, ymax = map(float, rect)
    if not (xmax > xmin and ymax > ymin):
        raise DomainError(f"degenerate rectangle {rect}")
    # clip to grid
    cx0, cx1 = max(xmin, grid.x0), min(xmax, grid.x1)
    cy0, cy1 = max(ymin, grid.y0), min(ymax, grid.y1)
    if cx1 <= cx0 or cy1 <= cy0:
        raise DomainError(f"rectangle {rect} does not overlap the grid")
    c_lo = int(np.floor((cx0 - grid.x0) / grid.dx))
    c_hi = min(int(np.ceil((cx1 - grid.x0) / grid.dx)), grid.nx)
    r_lo = int(np.floor((cy0 - grid.y0) / grid.dy))
    r_hi = min(int(np.ceil((cy1 - grid.y0) / grid.dy)), grid.ny)
    cols = np.arange(c_lo, c_hi)
    rows = np.arange(r_lo, r_hi)
    left = grid.x0 + cols * grid.dx
    bottom = grid.y0 + rows * grid.dy
    wx = np.clip(np.minimum(left + grid.dx, cx1) - np.maximum(left, cx0), 0.0, None)
    wy = np.clip(np.minimum(bottom + grid.dy, cy1) - np.maximum(bottom, cy0), 0.0, None)
    area = np.outer(wy, wx)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    idx = (rr * grid.nx + cc).ravel()
    w = area.ravel()
    keep = w > 1e-12 * grid.dx * grid.dy
    return idx[keep], w[keep]


def _points_in_polygon(px, py, poly: np.ndarray) -> np.ndarray:
    """Even-odd rule point-in-polygon test, vectorized over points."""
    inside = np.zeros(px.shape, dtype=bool)
    xs, ys = poly[:, 0], poly[:, 1]
    j = len(poly) - 1
    for i in range(len(poly)):
        xi, yi, xj, yj = xs[i], ys[i], xs[j], ys[j]
        crosses = (yi > py) != (yj > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = (xj - xi) * (py - yi) / (yj - yi) + xi
        inside ^= crosses & (px < xint)
        j = i
    return inside


def _polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _polygon_overlap_row(grid: GridSpec, vertices, subsample: int):
    poly = np.asarray(vertices, dtype=float)
    if poly.ndim != 2 or poly.shape[1] != 2 or len(poly) < 3:
        raise DomainError("polygon needs at least 3 (x, y) vertices")
    if _polygon_area(poly) <= 0:
        raise DomainError("degenerate polygon (zero area)")
    xmin, ymin = poly.min(axis=0)
    xmax, ymax = poly.max(axis=0)
    c_lo = max(int(np.floor((xmin - grid.x0) / grid.dx)), 0)
    c_hi = min(int(np.ceil((xmax - grid.x0) / grid.dx)), grid.nx)
    r_lo = max(int(np.floor((ymin - grid.y0) / grid.dy)), 0)
    r_hi = min(int(np.ceil((ymax - grid.y0) / grid.dy)), grid.ny)
    if c_hi <= c_lo or r_hi <= r_lo:
        raise DomainError("polygon does not overlap the grid")
    s = int(subsample)
    offs = (np.arange(s) + 0.5) / s
    rows, cols = np.meshgrid(np.arange(r_lo, r_hi), np.arange(c_lo, c_hi), indexing="ij")
    rows, cols = rows.ravel(), cols.ravel()
    # s*s midpoints inside each candidate cell
    ox, oy = np.meshgrid(offs, offs)
    px = grid.x0 + (cols[:, None] + ox.ravel()[None, :]) * grid.dx
    py = grid.y0 + (rows[:, None] + oy.ravel()[None, :]) * grid.dy
    frac = _points_in_polygon(px, py, poly).mean(axis=1)
    keep = frac > 0
    if not keep.any():
        raise DomainError("polygon does not overlap the grid at this subsampling resolution")
    return (rows * grid.nx + cols)[keep], frac[keep] * grid.dx * grid.dy


def build_areal_mapping(grid: GridSpec, areas: Sequence, subsample: int = 4) -> sp.csr_matrix:
    """Mapping matrix whose rows hold the proportion of each area in each cell.

    Rectangles ``(xmin, ymin, xmax, ymax)`` use exact overlap areas; polygons
    use ``subsample x subsample`` midpoint sampling of each candidate cell.
    Rows are renormalized to sum to one.
    """
    if subsample < 1:
        raise DomainError(f"subsample must be >= 1, got {subsample}")
    indptr, indices, data = [0], [], []
    for i, area in enumerate(areas):
        region = area.region if isinstance(area, ArealObs) else area
        try:
            if len(region) == 4 and all(np.isscalar(v) for v in region):
                idx, w = _rect_overlap_row(grid, region)
            else:
                idx, w = _polygon_overlap_row(grid, region, subsample)
        except DomainError as exc:
            raise DomainError(f"area row {i}: {exc}") from None
        order = np.argsort(idx)
        indices.append(idx[order])
        data.append(w[order] / w.sum())
        indptr.append(indptr[-1] + len(idx))
    n = len(indptr) - 1
    if n == 0:
        return sp.csr_matrix((0, grid.m))
    return sp.csr_matrix((np.concatenate(data), np.concatenate(indices), np.array(indptr)),
                         shape=(n, grid.m))


def coarse_tiling(grid: GridSpec, ncx: int, ncy: int | None = None) -> list[tuple]:
    """Rectangles of an ``ncx x ncy`` coarse grid covering the fine grid's extent."""
    ncy = ncx if ncy is None else ncy
    xs = np.linspace(grid.x0, grid.x1, ncx + 1)
    ys = np.linspace(grid.y0, grid.y1, ncy + 1)
    return [(xs[c], ys[r], xs[c + 1], ys[r + 1]) for r in range(ncy) for c in range(ncx)]

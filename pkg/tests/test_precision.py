import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from mrfgrid.errors import DomainError
from mrfgrid.grid import GridSpec
from mrfgrid.precision import (FAMILIES, build_dicar, build_hicar, build_icar, build_precision,
                               build_tpsmrf, count_zero_eigenvalues, dicar_weight,
                               null_space_basis, null_space_dim, parse_family, read_triplets,
                               second_difference_operator, write_triplets)

ALL = [("icar", None), ("hicar", 3.0), ("dicar", 5.0), ("tpsmrf", None)]


def _stencil_row(nx, ny, r, c):
    """Hand-written interior thin plate spline stencil."""
    row = {}
    for (dr, dc), w in {(0, 0): 20, (1, 0): -8, (-1, 0): -8, (0, 1): -8, (0, -1): -8,
                        (1, 1): 2, (1, -1): 2, (-1, 1): 2, (-1, -1): 2,
                        (2, 0): 1, (-2, 0): 1, (0, 2): 1, (0, -2): 1}.items():
        row[(r + dr) * nx + (c + dc)] = w
    return row


def test_icar_3x3():
    Q = build_icar(GridSpec(3, 3)).Q.toarray()
    assert Q[4, 4] == 4
    assert sorted(Q[4][Q[4] != 0].tolist()) == [-1, -1, -1, -1, 4]
    assert Q[0, 0] == 2 and Q[1, 1] == 3


def test_hicar_unit_distance_is_icar():
    g = GridSpec(6, 5)
    assert (build_hicar(g, 1.0).Q != build_icar(g).Q).nnz == 0


@pytest.mark.parametrize("max_dist, expected", [(3.0, 28), (1.5, 8), (2.0, 12)])
def test_hicar_interior_neighbour_counts(max_dist, expected):
    g = GridSpec(15, 15)
    Q = build_hicar(g, max_dist).Q
    centre = 7 * 15 + 7
    assert Q[centre, centre] == expected
    row = Q[centre].toarray().ravel()
    assert np.sum(row == -1) == expected


def test_hicar_rejects_small_distance():
    with pytest.raises(DomainError):
        build_hicar(GridSpec(4, 4), 0.5)


def test_dicar_weights():
    assert dicar_weight(1.0, 5.0) == pytest.approx(1.0, abs=1e-12)
    assert dicar_weight(5.0, 5.0) == pytest.approx(0.05, abs=1e-12)
    assert dicar_weight(math.sqrt(5), 5.0) == pytest.approx(0.22360679774997896, abs=1e-12)
    with pytest.raises(DomainError):
        dicar_weight(1.0, 1.0)
    with pytest.raises(DomainError):
        build_dicar(GridSpec(4, 4), 0.9)


def test_dicar_entries_match_weight_law():
    g = GridSpec(12, 12)
    Q = build_dicar(g, 5.0).Q
    centre = 6 * 12 + 6
    assert Q[centre, centre + 1] == pytest.approx(-1.0)
    assert Q[centre, centre + 5] == pytest.approx(-0.05)
    assert Q[centre, centre + 12 + 2] == pytest.approx(-0.05 ** 0.5)
    off = -Q[centre].toarray().ravel()
    off[centre] = 0
    assert np.all((off[off != 0] > 0) & (off[off != 0] <= 1))


def test_tpsmrf_interior_rows_match_stencil():
    nx = ny = 10
    Q = build_tpsmrf(GridSpec(nx, ny)).Q
    for r in range(2, ny - 2):
        for c in range(2, nx - 2):
            i = r * nx + c
            expected = np.zeros(nx * ny)
            for j, w in _stencil_row(nx, ny, r, c).items():
                expected[j] = w
            np.testing.assert_array_equal(Q[i].toarray().ravel(), expected)


def test_tpsmrf_annihilates_linear_trends():
    g = GridSpec(9, 7, x0=2.0, y0=-1.0, dx=0.3, dy=0.8)
    prec = build_tpsmrf(g)
    N = null_space_basis(prec)
    assert np.abs(prec.Q @ N).max() < 1e-9


def test_tpsmrf_needs_four_cells():
    with pytest.raises(DomainError):
        build_tpsmrf(GridSpec(3, 8))


def test_rw2_degenerate_variant():
    D = second_difference_operator(8, 1).toarray()
    Q = D.T @ D
    expected = np.diff(np.eye(8), n=2, axis=0)
    np.testing.assert_array_equal(D, expected)
    np.testing.assert_array_equal(Q[3, 1:6], [1, -4, 6, -4, 1])


@pytest.mark.parametrize("family, param", ALL)
@pytest.mark.parametrize("n", [8, 12])
def test_null_space_dimension(family, param, n):
    prec = build_precision(GridSpec(n, n), family, param)
    assert count_zero_eigenvalues(prec) == null_space_dim(prec) == (3 if family == "tpsmrf" else 1)


@pytest.mark.parametrize("family, param", ALL)
def test_structural_invariants(family, param):
    prec = build_precision(GridSpec(11, 9), family, param)
    Q = prec.Q
    assert (Q - Q.T).nnz == 0
    assert np.abs(Q @ np.ones(prec.m)).max() < 1e-10
    w = np.linalg.eigvalsh(Q.toarray())
    assert w.min() >= -1e-8 * w.max()
    off = Q - sp.diags(Q.diagonal())
    if family == "tpsmrf":
        assert off.data.max() > 0
    else:
        assert off.data.max() <= 0


@pytest.mark.parametrize("family, param", ALL)
def test_sparse_quadratic_form_matches_dense(family, param, rng):
    prec = build_precision(GridSpec(8, 8), family, param)
    Qd = prec.Q.toarray()
    for x in rng.standard_normal((100, 64)):
        sparse_val = x @ (prec.Q @ x)
        assert sparse_val == pytest.approx(x @ Qd @ x, rel=1e-8)


def test_scaling_and_labels():
    prec = build_hicar(GridSpec(5, 5), 3)
    assert (2 * prec).Q[12, 12] == 2 * prec.Q[12, 12]
    assert prec.label() == "hicar:3"
    assert parse_family("TPS") == ("tpsmrf", None)
    assert parse_family("dicar:5") == ("dicar", 5.0)
    with pytest.raises(DomainError):
        parse_family("car")
    with pytest.raises(DomainError):
        parse_family("hicar:x")
    assert set(FAMILIES) == {"icar", "hicar", "dicar", "tpsmrf"}


@pytest.mark.parametrize("family, param", ALL)
def test_triplet_round_trip(tmp_path, family, param):
    prec = build_precision(GridSpec(6, 5), family, param)
    path = tmp_path / "q.txt"
    write_triplets(prec, path)
    back = read_triplets(path)
    assert back.family == prec.family and back.c == prec.c and back.grid == prec.grid
    assert abs(back.Q - prec.Q).max() == 0
    first = path.read_text().splitlines()[0].split()
    assert int(first[0]) <= int(first[1])


@settings(max_examples=20, deadline=None)
@given(st.integers(4, 9), st.integers(4, 9))
def test_tps_row_sums_any_shape(nx, ny):
    Q = build_tpsmrf(GridSpec(nx, ny)).Q
    assert np.abs(Q @ np.ones(nx * ny)).max() < 1e-10

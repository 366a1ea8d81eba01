from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ned.linalg import SolverError, default_rel_tol, pinv, pinv_solve, svd


def exact_normal_solve(A, b):
    """(A^T A)^{-1} A^T b by Gaussian elimination over the rationals."""
    A = [[Fraction(float(v)) for v in row] for row in A]
    b = [Fraction(float(v)) for v in b]
    n = len(A[0])
    M = [[sum(A[k][i] * A[k][j] for k in range(len(A))) for j in range(n)] for i in range(n)]
    v = [sum(A[k][i] * b[k] for k in range(len(A))) for i in range(n)]
    for c in range(n):
        p = next(r for r in range(c, n) if M[r][c] != 0)
        M[c], M[p] = M[p], M[c]
        v[c], v[p] = v[p], v[c]
        for r in range(c + 1, n):
            f = M[r][c] / M[c][c]
            M[r] = [a - f * e for a, e in zip(M[r], M[c])]
            v[r] -= f * v[c]
    x = [Fraction(0)] * n
    for r in range(n - 1, -1, -1):
        x[r] = (v[r] - sum(M[r][k] * x[k] for k in range(r + 1, n))) / M[r][r]
    return np.array([float(t) for t in x])


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def matrices(max_side=12):
    shape = st.tuples(st.integers(1, max_side), st.integers(1, max_side))
    return shape.flatmap(lambda s: arrays(np.float64, s, elements=finite))


# -- svd --------------------------------------------------------------------


def test_svd_identity():
    assert np.allclose(svd(np.eye(3)).s, [1, 1, 1])


def test_svd_diag_with_zero():
    assert np.allclose(svd(np.diag([3.0, 0.0])).s, [3, 0])


def test_svd_reconstruction_random(rng):
    A = rng.standard_normal((6, 4))
    f = svd(A)
    assert np.max(np.abs((f.u * f.s) @ f.vt - A)) <= 1e-10 * max(1.0, f.s[0])


@given(matrices())
def test_svd_factor_invariants(A):
    f = svd(A)
    assert np.all(np.diff(f.s) <= 0) and np.all(f.s >= 0)
    k = len(f.s)
    assert np.allclose(f.u.T @ f.u, np.eye(k), atol=1e-10)
    assert np.allclose(f.vt @ f.vt.T, np.eye(k), atol=1e-10)
    assert np.max(np.abs(f.reconstruct() - A), initial=0) <= 1e-10 * max(1.0, f.s[0])


def test_svd_rejects_nonfinite():
    with pytest.raises(SolverError):
        svd(np.array([[1.0, np.nan]]))


# -- pinv_solve ---------------------------------------------------------------


def test_pinv_solve_identity():
    x, rank = pinv_solve(np.eye(2), np.array([3.0, 4.0]))
    assert np.allclose(x, [3, 4]) and rank == 2


def test_pinv_solve_rank_deficient_min_norm():
    x, rank = pinv_solve(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([2.0, 5.0]))
    assert np.allclose(x, [2, 0]) and rank == 1


def test_pinv_solve_matches_exact_normal_equations(rng):
    A = rng.standard_normal((8, 3))
    b = rng.standard_normal(8)
    x, rank = pinv_solve(A, b)
    ref = exact_normal_solve(A, b)
    assert rank == 3
    assert np.linalg.norm(x - ref) <= 1e-9 * np.linalg.norm(ref)


def test_rank_zero_returns_zero_with_flag():
    x, rank = pinv_solve(np.zeros((3, 2)), np.ones(3))
    assert rank == 0 and np.all(x == 0)


def test_truncation_drops_small_singular_values():
    A = np.diag([1.0, 1e-6])
    x, rank = pinv_solve(A, np.array([1.0, 1.0]), rel_tol=1e-3)
    assert rank == 1 and np.allclose(x, [1, 0])
    x, rank = pinv_solve(A, np.array([1.0, 1.0]), rel_tol=1e-9)
    assert rank == 2 and np.allclose(x, [1, 1e6])


def test_default_tolerance():
    assert default_rel_tol((10, 3)) == 10 * np.finfo(float).eps


@pytest.mark.parametrize(
    "a, b, kw",
    [
        (np.eye(2), np.ones(3), {}),
        (np.eye(2), np.ones(2), {"rel_tol": 0.0}),
        (np.eye(2), np.ones(2), {"rel_tol": 1.0}),
        (np.ones(3), np.ones(3), {}),
    ],
)
def test_pinv_solve_rejects_bad_input(a, b, kw):
    with pytest.raises(ValueError):
        pinv_solve(a, b, **kw)


def test_pinv_solve_rejects_nonfinite_rhs():
    with pytest.raises(SolverError):
        pinv_solve(np.eye(2), np.array([1.0, np.inf]))


@given(st.integers(1, 50), st.integers(1, 50), st.integers(1, 50), st.integers(0, 2**31))
def test_moore_penrose_identity(m, n, r, seed):
    rng = np.random.default_rng(seed)
    r = min(r, m, n)
    A = rng.standard_normal((m, r)) @ rng.standard_normal((r, n))
    P = pinv(A, 1e-12)
    s_max = svd(A).s[0]
    assert np.max(np.abs(A @ P @ A - A)) <= 1e-8 * s_max
    assert np.max(np.abs(P @ A @ P - P)) <= 1e-8 * np.max(np.abs(P))


@given(st.integers(1, 30), st.integers(0, 2**31))
def test_square_full_rank_matches_direct_solve(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n)) + n * np.eye(n)
    b = rng.standard_normal(n)
    x, _ = pinv_solve(A, b)
    ref = np.linalg.solve(A, b)
    assert np.linalg.norm(x - ref) <= 1e-9 * np.linalg.norm(ref)


@given(st.integers(1, 15), st.integers(1, 20), st.integers(0, 2**31))
def test_minimum_norm_among_solutions(m, extra, seed):
    rng = np.random.default_rng(seed)
    n = m + extra
    A = rng.standard_normal((m, n))
    b = rng.standard_normal(m)
    x, _ = pinv_solve(A, b)
    assert np.linalg.norm(A @ x - b) <= 1e-9 * np.linalg.norm(b)
    null = np.linalg.svd(A)[2][m:].T
    for _ in range(5):
        other = x + null @ rng.standard_normal(n - m)
        assert np.linalg.norm(x) <= np.linalg.norm(other) + 1e-12


@given(st.integers(2, 40), st.integers(1, 10), st.integers(0, 2**31))
def test_tall_path_agrees_with_lstsq(m, n, seed):
    rng = np.random.default_rng(seed)
    n = min(n, m - 1)
    A = rng.standard_normal((m, n))
    b = rng.standard_normal(m)
    x, _ = pinv_solve(A, b)
    ref = np.linalg.lstsq(A, b, rcond=None)[0]
    assert np.allclose(x, ref, rtol=1e-9, atol=1e-10)


@given(st.integers(0, 2**31))
def test_solution_lies_in_row_space(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((4, 3)) @ rng.standard_normal((3, 9))
    b = rng.standard_normal(4)
    x, rank = pinv_solve(A, b)
    f = svd(A)
    V = f.vt[:rank].T
    assert np.linalg.norm(x - V @ (V.T @ x)) <= 1e-9 * np.linalg.norm(x)

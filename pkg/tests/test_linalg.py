import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from oracles import dense_kkt, dense_ldl
from rlqp.linalg import (SparseMatrixCsc, ZeroPivotError, assemble_kkt, ldl_factor, ldl_solve,
                         minimum_degree_order, symmetric_from_upper, update_rho_entries)


def csc(a):
    return SparseMatrixCsc.from_dense(np.asarray(a, float))


def upper(a):
    return SparseMatrixCsc.from_scipy(sp.triu(sp.csc_matrix(np.asarray(a, float))))


def factor_dense(f):
    N = f.D.shape[0]
    L = f.L.to_dense() + np.eye(N)
    return L, f.D


def random_qd(rng, n, m, density=0.4):
    M = rng.standard_normal((n, n)) * (rng.random((n, n)) < density)
    P = M @ M.T
    A = rng.standard_normal((m, n)) * (rng.random((m, n)) < density)
    rho = 10.0 ** rng.uniform(-3, 3, size=m)
    return P, A, rho


# -- SparseMatrixCsc ---------------------------------------------------------

def test_csc_rejects_unsorted_rows():
    with pytest.raises(ValueError):
        SparseMatrixCsc(2, 1, np.array([0, 2]), np.array([1, 0]), np.array([1.0, 2.0]))


def test_csc_rejects_bad_col_ptr():
    with pytest.raises(ValueError):
        SparseMatrixCsc(2, 2, np.array([0, 2, 1]), np.array([0, 1]), np.array([1.0, 2.0]))


def test_csc_dense_round_trip():
    a = np.array([[1.0, 0, 2], [0, 0, 3]])
    assert np.array_equal(csc(a).to_dense(), a)
    assert csc(a).nnz == 3


def test_symmetric_from_upper():
    u = upper([[1.0, 2.0], [2.0, 5.0]])
    assert np.array_equal(symmetric_from_upper(u), [[1, 2], [2, 5]])


# -- assemble_kkt ---------------------------------------------------------------

def test_kkt_one_by_one():
    k = assemble_kkt(upper([[1.0]]), csc([[1.0]]), 1e-6, [0.1])
    K = symmetric_from_upper(k.kkt)
    assert K[0, 0] == 1 + 1e-6
    assert K[1, 1] == -10.0
    assert K[0, 1] == K[1, 0] == 1.0


def test_kkt_without_constraints():
    P = np.array([[2.0, 1.0], [1.0, 3.0]])
    k = assemble_kkt(upper(P), SparseMatrixCsc.zeros(0, 2), 1e-6, [])
    assert np.array_equal(symmetric_from_upper(k.kkt), P + 1e-6 * np.eye(2))


def test_kkt_matches_dense_assembly():
    rng = np.random.default_rng(5)
    M = rng.standard_normal((5, 5))
    P = M @ M.T
    A = rng.standard_normal((3, 5))
    k = assemble_kkt(upper(P), csc(A), 1e-6, np.ones(3))
    np.testing.assert_allclose(symmetric_from_upper(k.kkt), dense_kkt(P, A, 1e-6, np.ones(3)),
                               rtol=0, atol=1e-15)


def test_kkt_only_reads_upper_triangle_of_P():
    P_lower_garbage = np.array([[1.0, 2.0], [99.0, 4.0]])
    k = assemble_kkt(csc(P_lower_garbage), SparseMatrixCsc.zeros(0, 2), 1.0, [])
    assert np.array_equal(symmetric_from_upper(k.kkt), [[2, 2], [2, 5]])


@pytest.mark.parametrize("rho", [[0.0], [-1.0], [np.inf], [1.0, 2.0]])
def test_kkt_rejects_bad_rho(rho):
    with pytest.raises(ValueError):
        assemble_kkt(upper([[1.0]]), csc([[1.0]]), 1e-6, rho)


def test_kkt_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        assemble_kkt(upper(np.eye(2)), csc([[1.0, 2.0, 3.0]]), 1e-6, [1.0])


def test_kkt_keeps_diagonal_slot_for_empty_row():
    k = assemble_kkt(upper(np.eye(2)), csc([[0.0, 0.0], [1.0, 0.0]]), 1e-6, [2.0, 4.0])
    K = symmetric_from_upper(k.kkt)
    assert K[2, 2] == -0.5 and K[3, 3] == -0.25


# -- update_rho_entries ------------------------------------------------------

def test_update_rho_changes_only_diagonal_slot():
    k = assemble_kkt(upper([[1.0]]), csc([[1.0]]), 1e-6, [0.1])
    before = k.kkt.values.copy()
    update_rho_entries(k, [0.2])
    K = symmetric_from_upper(k.kkt)
    assert K[1, 1] == -5.0
    changed = np.flatnonzero(before != k.kkt.values)
    assert list(changed) == list(k.rho_inv_diag_positions)


def test_update_rho_unchanged_is_bit_identical():
    rng = np.random.default_rng(1)
    P, A, rho = random_qd(rng, 4, 3)
    k = assemble_kkt(upper(P), csc(A), 1e-6, rho)
    before = k.kkt.values.tobytes()
    update_rho_entries(k, rho)
    assert k.kkt.values.tobytes() == before


def test_update_rho_equals_reassembly():
    rng = np.random.default_rng(2)
    P, A, rho = random_qd(rng, 6, 4)
    k = assemble_kkt(upper(P), csc(A), 1e-6, rho)
    new_rho = 10.0 ** rng.uniform(-3, 3, size=4)
    update_rho_entries(k, new_rho)
    fresh = assemble_kkt(upper(P), csc(A), 1e-6, new_rho)
    assert np.array_equal(k.kkt.to_dense(), fresh.kkt.to_dense())


# -- ldl_factor / ldl_solve -----------------------------------------------------

def test_ldl_identity():
    f = ldl_factor(SparseMatrixCsc.from_scipy(sp.eye(6, format="csc")))
    L, D = factor_dense(f)
    assert np.array_equal(L, np.eye(6))
    assert np.array_equal(D, np.ones(6))
    b = np.arange(6.0)
    assert np.array_equal(ldl_solve(f, b), b)


def test_ldl_two_by_two_by_hand():
    f = ldl_factor(upper([[2.0, 1.0], [1.0, -1.0]]))
    assert list(f.perm) == [0, 1]
    L, D = factor_dense(f)
    assert np.allclose(L, [[1.0, 0.0], [0.5, 1.0]], atol=0)
    assert np.allclose(D, [2.0, -1.5], atol=0)
    # The exact solution of [[2,1],[1,-1]] x = [1,0] is x = [1/3, 1/3].
    x = ldl_solve(f, np.array([1.0, 0.0]))
    np.testing.assert_allclose(x, np.linalg.solve([[2, 1], [1, -1]], [1, 0]), atol=1e-15)


def test_ldl_eight_by_eight_matches_dense_reconstruction():
    rng = np.random.default_rng(8)
    P, A, rho = random_qd(rng, 5, 3)
    K = dense_kkt(P, A, 1e-6, rho)
    f = ldl_factor(assemble_kkt(upper(P), csc(A), 1e-6, rho))
    L, D = factor_dense(f)
    Kp = K[np.ix_(f.perm, f.perm)]
    np.testing.assert_allclose(L @ np.diag(D) @ L.T, Kp, atol=1e-10)
    # and against the textbook recurrence on the same permuted matrix
    Lr, Dr = dense_ldl(Kp)
    np.testing.assert_allclose(L, Lr, atol=1e-10)
    np.testing.assert_allclose(D, Dr, atol=1e-10)


def test_ldl_quasi_definite_inertia():
    rng = np.random.default_rng(3)
    P, A, rho = random_qd(rng, 7, 5)
    f = ldl_factor(assemble_kkt(upper(P), csc(A), 1e-6, rho))
    assert np.sum(f.D > 0) == 7 and np.sum(f.D < 0) == 5


def test_ldl_zero_pivot_raises():
    with pytest.raises(ZeroPivotError):
        ldl_factor(upper([[0.0, 1.0], [1.0, 0.0]]))


def test_ldl_solve_rejects_wrong_length():
    f = ldl_factor(upper(np.eye(3)))
    with pytest.raises(ValueError):
        ldl_solve(f, np.ones(4))


def test_minimum_degree_is_a_permutation():
    rng = np.random.default_rng(4)
    P, A, rho = random_qd(rng, 60, 40, density=0.05)
    k = assemble_kkt(upper(P), csc(A), 1e-6, rho)
    perm = minimum_degree_order(k.kkt)
    assert sorted(perm) == list(range(100))


def test_ordering_reduces_fill_on_arrow_matrix():
    # Arrow matrix with the dense row first: natural order fills in completely.
    N = 80
    K = np.eye(N) * 4.0
    K[0, :] = K[:, 0] = 1.0
    K[0, 0] = float(N)
    f_nat = ldl_factor(upper(K), ordering="natural")
    f_amd = ldl_factor(upper(K), ordering="mindegree")
    assert f_amd.L.nnz < f_nat.L.nnz
    b = np.arange(N, dtype=float)
    np.testing.assert_allclose(ldl_solve(f_amd, b), np.linalg.solve(K, b), atol=1e-12)


def test_large_kkt_residual_with_ordering():
    rng = np.random.default_rng(9)
    P, A, rho = random_qd(rng, 80, 60, density=0.05)
    k = assemble_kkt(upper(P), csc(A), 1e-6, rho)
    f = ldl_factor(k)
    b = rng.standard_normal(140)
    x = ldl_solve(f, b)
    K = dense_kkt(P, A, 1e-6, rho)
    assert np.max(np.abs(K @ x - b)) <= 1e-8 * (1 + np.max(np.abs(b)))


@settings(max_examples=120, deadline=None)
@given(n=st.integers(1, 30), m=st.integers(1, 20), seed=st.integers(0, 2**32 - 1))
def test_ldl_property_reconstruction_and_residual(n, m, seed):
    rng = np.random.default_rng(seed)
    P, A, rho = random_qd(rng, n, m)
    k = assemble_kkt(upper(P), csc(A), 1e-6, rho)
    f = ldl_factor(k)
    K = dense_kkt(P, A, 1e-6, rho)
    L, D = factor_dense(f)
    scale = 1 + np.max(np.abs(K))
    assert np.max(np.abs(L @ np.diag(D) @ L.T - K[np.ix_(f.perm, f.perm)])) <= 1e-9 * scale
    b = rng.standard_normal(n + m)
    x = ldl_solve(f, b)
    assert np.max(np.abs(K @ x - b)) <= 1e-8 * (1 + np.max(np.abs(b)))


def test_refactor_after_rho_update_reuses_pattern():
    rng = np.random.default_rng(11)
    P, A, rho = random_qd(rng, 10, 8)
    k = assemble_kkt(upper(P), csc(A), 1e-6, rho)
    f1 = ldl_factor(k)
    update_rho_entries(k, rho * 7.0)
    f2 = ldl_factor(k)
    assert np.array_equal(f1.perm, f2.perm)
    assert np.array_equal(f1.L.col_ptr, f2.L.col_ptr)
    b = rng.standard_normal(18)
    np.testing.assert_allclose(dense_kkt(P, A, 1e-6, rho * 7.0) @ ldl_solve(f2, b), b, atol=1e-8)

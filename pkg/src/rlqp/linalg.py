"""Sparse CSC storage, KKT assembly and LDL^T factorization.

The KKT matrix is kept in upper-triangular CSC form.  Factorization follows
the elimination-tree / up-looking scheme used by QDLDL, so a quasi-definite
matrix factors without pivoting once a fill-reducing permutation is chosen.
"""

from __future__ import annotations

import dataclasses
from typing import Optional, Union

import numba
import numpy as np
import scipy.sparse as sp

# Below this size the natural ordering is used.
NATURAL_ORDER_THRESHOLD = 64


class ZeroPivotError(ArithmeticError):
    """Raised when LDL^T meets a zero pivot (input was not quasi-definite)."""


@dataclasses.dataclass
class SparseMatrixCsc:
    nrows: int
    ncols: int
    col_ptr: np.ndarray
    row_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.col_ptr = np.asarray(self.col_ptr, dtype=np.int64)
        self.row_idx = np.asarray(self.row_idx, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.col_ptr) != self.ncols + 1:
            raise ValueError("col_ptr must have ncols + 1 entries")
        if self.col_ptr[0] != 0 or self.col_ptr[-1] != len(self.values):
            raise ValueError("col_ptr bounds inconsistent with values")
        if len(self.row_idx) != len(self.values):
            raise ValueError("row_idx and values differ in length")
        if np.any(np.diff(self.col_ptr) < 0):
            raise ValueError("col_ptr must be nondecreasing")
        if len(self.row_idx) and (self.row_idx.min() < 0 or self.row_idx.max() >= self.nrows):
            raise ValueError("row index out of range")
        for j in range(self.ncols):
            rows = self.row_idx[self.col_ptr[j]:self.col_ptr[j + 1]]
            if len(rows) > 1 and np.any(np.diff(rows) <= 0):
                raise ValueError(f"row indices in column {j} not strictly increasing")

    @property
    def shape(self):
        return (self.nrows, self.ncols)

    @property
    def nnz(self) -> int:
        return len(self.values)

    @classmethod
    def from_scipy(cls, mat) -> "SparseMatrixCsc":
        mat = sp.csc_matrix(mat, dtype=np.float64)
        mat.sum_duplicates()
        mat.sort_indices()
        return cls(mat.shape[0], mat.shape[1], mat.indptr.copy(), mat.indices.copy(), mat.data.copy())

    @classmethod
    def from_dense(cls, arr) -> "SparseMatrixCsc":
        arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
        return cls.from_scipy(sp.csc_matrix(arr))

    @classmethod
    def zeros(cls, nrows: int, ncols: int) -> "SparseMatrixCsc":
        return cls(nrows, ncols, np.zeros(ncols + 1, dtype=np.int64), [], [])

    def to_scipy(self) -> sp.csc_matrix:
        return sp.csc_matrix((self.values, self.row_idx, self.col_ptr), shape=self.shape)

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def copy(self) -> "SparseMatrixCsc":
        return SparseMatrixCsc(self.nrows, self.ncols, self.col_ptr.copy(),
                               self.row_idx.copy(), self.values.copy())


def symmetric_from_upper(upper: SparseMatrixCsc) -> np.ndarray:
    """Dense symmetric matrix from its upper-triangular storage."""
    d = upper.to_dense()
    return d + np.triu(d, 1).T


# --------------------------------------------------------------------------
# KKT assembly
# --------------------------------------------------------------------------

@dataclasses.dataclass
class KktSystem:
    kkt: SparseMatrixCsc
    sigma: float
    rho_inv_diag_positions: np.ndarray
    n: int
    m: int
    # Cached ordering and symbolic analysis; valid while the pattern is fixed.
    _symbolic: Optional["_Symbolic"] = dataclasses.field(default=None, repr=False, compare=False)


def _check_rho(rho, m):
    rho = np.asarray(rho, dtype=np.float64).reshape(-1)
    if rho.shape[0] != m:
        raise ValueError(f"rho has length {rho.shape[0]}, expected {m}")
    if not np.all(np.isfinite(rho)) or np.any(rho <= 0):
        raise ValueError("rho entries must be finite and strictly positive")
    return rho


def assemble_kkt(P: SparseMatrixCsc, A: SparseMatrixCsc, sigma: float, rho) -> KktSystem:
    """Build [[P + sigma I, A^T], [A, -diag(rho)^-1]] in upper CSC storage.

    Only the upper triangle of ``P`` is read.  The positions of the
    ``-1/rho_i`` diagonal entries inside ``kkt.values`` are recorded so that
    :func:`update_rho_entries` can rewrite them in place.
    """
    n = P.ncols
    if P.nrows != n:
        raise ValueError("P must be square")
    if A.ncols != n:
        raise ValueError(f"A has {A.ncols} columns, expected {n}")
    m = A.nrows
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    rho = _check_rho(rho, m)

    Pu = sp.triu(P.to_scipy(), format="csc")
    top_left = Pu + sigma * sp.eye(n, format="csc")
    At = A.to_scipy().T.tocsc()
    dual = sp.diags(-1.0 / rho, format="csc") if m else sp.csc_matrix((0, 0))
    K = sp.bmat([[top_left, At], [None, dual]], format="csc") if m else top_left.tocsc()
    K.sort_indices()
    # Keep explicit zeros on the diagonal pattern; drop others introduced by data.
    kkt = SparseMatrixCsc(n + m, n + m, K.indptr, K.indices, K.data)

    # Diagonal entries are the last stored entry of each column of an upper matrix.
    positions = kkt.col_ptr[n + 1:n + m + 1] - 1
    if m:
        assert np.all(kkt.row_idx[positions] == np.arange(n, n + m))
    return KktSystem(kkt, float(sigma), positions.astype(np.int64), n, m)


def update_rho_entries(kkt: KktSystem, rho) -> KktSystem:
    """Rewrite the constraint-block diagonal in place to -1/rho."""
    rho = _check_rho(rho, kkt.m)
    kkt.kkt.values[kkt.rho_inv_diag_positions] = -1.0 / rho
    return kkt


# --------------------------------------------------------------------------
# Ordering
# --------------------------------------------------------------------------

def minimum_degree_order(upper: SparseMatrixCsc) -> np.ndarray:
    """Greedy minimum-degree ordering on the symmetric pattern.

    Exact degrees on the explicit elimination graph; ties broken by the
    smallest index so the result is deterministic.
    """
    n = upper.ncols
    adj = [set() for _ in range(n)]
    for j in range(n):
        for p in range(upper.col_ptr[j], upper.col_ptr[j + 1]):
            i = int(upper.row_idx[p])
            if i != j:
                adj[i].add(j)
                adj[j].add(i)
    alive = np.ones(n, dtype=bool)
    degree = np.array([len(a) for a in adj], dtype=np.int64)
    big = np.iinfo(np.int64).max
    order = np.empty(n, dtype=np.int64)
    for k in range(n):
        v = int(np.argmin(np.where(alive, degree, big)))
        order[k] = v
        alive[v] = False
        nbrs = adj[v]
        for u in nbrs:
            au = adj[u]
            au.discard(v)
            au |= nbrs
            au.discard(u)
            degree[u] = len(au)
        adj[v] = set()
    return order


def _symmetric_permute_upper(upper: SparseMatrixCsc, perm: np.ndarray):
    """Return (permuted upper CSC, position map) for C = P K P^T.

    ``C[i, j] = K[perm[i], perm[j]]``; ``pos_map[p]`` is the slot in C that
    receives K's stored entry ``p``.
    """
    n = upper.ncols
    pinv = np.empty(n, dtype=np.int64)
    pinv[perm] = np.arange(n)
    cols = np.repeat(np.arange(n), np.diff(upper.col_ptr))
    rows = upper.row_idx
    ni = pinv[rows]
    nj = pinv[cols]
    r = np.minimum(ni, nj)
    c = np.maximum(ni, nj)
    key = c * n + r
    order = np.argsort(key, kind="stable")
    col_ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(col_ptr, c + 1, 1)
    col_ptr = np.cumsum(col_ptr)
    pos_map = np.empty(len(rows), dtype=np.int64)
    pos_map[order] = np.arange(len(rows))
    permuted = SparseMatrixCsc(n, n, col_ptr, r[order], upper.values[order])
    return permuted, pos_map


# --------------------------------------------------------------------------
# Numeric kernels (QDLDL-style)
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _etree(n, Ap, Ai):
    work = np.zeros(n, dtype=np.int64)
    Lnz = np.zeros(n, dtype=np.int64)
    etree = np.full(n, -1, dtype=np.int64)
    for j in range(n):
        work[j] = j
        for p in range(Ap[j], Ap[j + 1]):
            i = Ai[p]
            if i > j:
                return etree, Lnz, False
            while work[i] != j:
                if etree[i] == -1:
                    etree[i] = j
                Lnz[i] += 1
                work[i] = j
                i = etree[i]
    return etree, Lnz, True


@numba.njit(cache=True)
def _factor(n, Ap, Ai, Ax, etree, Lnz, Lp, Li, Lx, D, Dinv):
    y_vals = np.zeros(n)
    y_marks = np.zeros(n, dtype=np.bool_)
    y_idx = np.zeros(n, dtype=np.int64)
    elim = np.zeros(n, dtype=np.int64)
    next_space = Lp[:n].copy()
    for k in range(n):
        D[k] = 0.0
        nnz_y = 0
        for p in range(Ap[k], Ap[k + 1]):
            b = Ai[p]
            if b == k:
                D[k] = Ax[p]
                continue
            y_vals[b] = Ax[p]
            nxt = b
            if not y_marks[nxt]:
                y_marks[nxt] = True
                elim[0] = nxt
                ne = 1
                nxt = etree[b]
                while nxt != -1 and nxt < k:
                    if y_marks[nxt]:
                        break
                    y_marks[nxt] = True
                    elim[ne] = nxt
                    ne += 1
                    nxt = etree[nxt]
                while ne > 0:
                    ne -= 1
                    y_idx[nnz_y] = elim[ne]
                    nnz_y += 1
        for t in range(nnz_y - 1, -1, -1):
            c = y_idx[t]
            slot = next_space[c]
            yc = y_vals[c]
            for q in range(Lp[c], slot):
                y_vals[Li[q]] -= Lx[q] * yc
            Li[slot] = k
            Lx[slot] = yc * Dinv[c]
            D[k] -= yc * Lx[slot]
            next_space[c] += 1
            y_vals[c] = 0.0
            y_marks[c] = False
        if D[k] == 0.0:
            return k
        Dinv[k] = 1.0 / D[k]
    return -1


@numba.njit(cache=True)
def _ldl_solve_inplace(n, Lp, Li, Lx, Dinv, x):
    for i in range(n):
        xi = x[i]
        for j in range(Lp[i], Lp[i + 1]):
            x[Li[j]] -= Lx[j] * xi
    for i in range(n):
        x[i] *= Dinv[i]
    for i in range(n - 1, -1, -1):
        s = x[i]
        for j in range(Lp[i], Lp[i + 1]):
            s -= Lx[j] * x[Li[j]]
        x[i] = s


@numba.njit(cache=True)
def _sym_upper_matvec(n, Kp, Ki, Kx, x, out):
    for i in range(n):
        out[i] = 0.0
    for j in range(n):
        xj = x[j]
        for p in range(Kp[j], Kp[j + 1]):
            i = Ki[p]
            v = Kx[p]
            out[i] += v * xj
            if i != j:
                out[j] += v * x[i]


@numba.njit(cache=True)
def _perm_solve(n, perm, Lp, Li, Lx, Dinv, b, work, out):
    for i in range(n):
        work[i] = b[perm[i]]
    _ldl_solve_inplace(n, Lp, Li, Lx, Dinv, work)
    for i in range(n):
        out[perm[i]] = work[i]


@numba.njit(cache=True)
def _refined_solve(n, perm, Lp, Li, Lx, Dinv, Kp, Ki, Kx, b, out, work, resid):
    _perm_solve(n, perm, Lp, Li, Lx, Dinv, b, work, out)
    _sym_upper_matvec(n, Kp, Ki, Kx, out, resid)
    for i in range(n):
        resid[i] = b[i] - resid[i]
    _perm_solve(n, perm, Lp, Li, Lx, Dinv, resid, work, resid)
    for i in range(n):
        out[i] += resid[i]


def sym_matvec(upper: SparseMatrixCsc, x) -> np.ndarray:
    """y = K x for a symmetric K held as its upper triangle."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty(upper.ncols)
    _sym_upper_matvec(upper.ncols, upper.col_ptr, upper.row_idx, upper.values, x, out)
    return out


# --------------------------------------------------------------------------
# Factor / solve
# --------------------------------------------------------------------------

@dataclasses.dataclass
class _Symbolic:
    perm: np.ndarray
    perm_inv: np.ndarray
    permuted: SparseMatrixCsc
    pos_map: np.ndarray
    etree: np.ndarray
    Lnz: np.ndarray
    Lp: np.ndarray


@dataclasses.dataclass
class LdlFactor:
    L: SparseMatrixCsc
    D: np.ndarray
    perm: np.ndarray
    perm_inv: np.ndarray
    Dinv: np.ndarray = dataclasses.field(repr=False)
    # The (unpermuted) matrix that was factored, for iterative refinement.
    K: SparseMatrixCsc = dataclasses.field(repr=False)


def _analyse(upper: SparseMatrixCsc, ordering: str) -> _Symbolic:
    n = upper.ncols
    if ordering == "auto":
        ordering = "natural" if n < NATURAL_ORDER_THRESHOLD else "mindegree"
    if ordering == "natural":
        perm = np.arange(n, dtype=np.int64)
    elif ordering == "mindegree":
        perm = minimum_degree_order(upper)
    else:
        raise ValueError(f"unknown ordering {ordering!r}")
    perm_inv = np.empty(n, dtype=np.int64)
    perm_inv[perm] = np.arange(n)
    permuted, pos_map = _symmetric_permute_upper(upper, perm)
    etree, Lnz, ok = _etree(n, permuted.col_ptr, permuted.row_idx)
    if not ok:
        raise ValueError("matrix is not upper triangular")
    Lp = np.zeros(n + 1, dtype=np.int64)
    Lp[1:] = np.cumsum(Lnz)
    return _Symbolic(perm, perm_inv, permuted, pos_map, etree, Lnz, Lp)


def ldl_factor(kkt: Union[KktSystem, SparseMatrixCsc], ordering: str = "auto") -> LdlFactor:
    """Factor P K P^T = L D L^T.

    The symbolic analysis is cached on a :class:`KktSystem` and reused across
    refactorizations after :func:`update_rho_entries`.
    """
    if isinstance(kkt, KktSystem):
        upper = kkt.kkt
        sym = kkt._symbolic
        if sym is None or len(sym.pos_map) != upper.nnz:
            sym = _analyse(upper, ordering)
            kkt._symbolic = sym
    else:
        upper = kkt
        if upper.nrows != upper.ncols:
            raise ValueError("matrix must be square")
        sym = _analyse(upper, ordering)
    n = upper.ncols
    Ax = np.empty(upper.nnz)
    Ax[sym.pos_map] = upper.values
    Li = np.zeros(sym.Lp[-1], dtype=np.int64)
    Lx = np.zeros(sym.Lp[-1])
    D = np.zeros(n)
    Dinv = np.zeros(n)
    bad = _factor(n, sym.permuted.col_ptr, sym.permuted.row_idx, Ax, sym.etree,
                  sym.Lnz, sym.Lp, Li, Lx, D, Dinv)
    if bad >= 0:
        raise ZeroPivotError(f"zero pivot at permuted index {bad}")
    L = SparseMatrixCsc.__new__(SparseMatrixCsc)
    # Bypass validation: the kernel emits sorted, in-range indices.
    L.nrows, L.ncols, L.col_ptr, L.row_idx, L.values = n, n, sym.Lp, Li, Lx
    return LdlFactor(L, D, sym.perm, sym.perm_inv, Dinv, upper.copy())


def ldl_solve(factor: LdlFactor, b) -> np.ndarray:
    """Solve K x = b, with one pass of iterative refinement."""
    b = np.ascontiguousarray(b, dtype=np.float64)
    n = factor.D.shape[0]
    if b.shape != (n,):
        raise ValueError(f"rhs has shape {b.shape}, expected ({n},)")
    out = np.empty(n)
    K = factor.K
    _refined_solve(n, factor.perm, factor.L.col_ptr, factor.L.row_idx, factor.L.values,
                   factor.Dinv, K.col_ptr, K.row_idx, K.values, b, out,
                   np.empty(n), np.empty(n))
    return out

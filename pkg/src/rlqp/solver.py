"""ADMM iteration for  min 1/2 x'Px + q'x  s.t.  l <= Ax <= u.

Each iteration solves the quasi-definite KKT system

    [P + sigma I    A'        ] [x~]   [sigma x - q     ]
    [A             -diag(rho)^-1] [v ] = [z - diag(rho)^-1 y]

then

    z~ = z + (v - y) / rho
    z  = clip(z~ + y / rho, l, u)
    y  = y + rho (z~ - z)

The dual sign convention is P x + q + A'y = 0 at a solution, with y_i > 0
on active upper bounds and y_i < 0 on active lower bounds.
"""

from __future__ import annotations

import dataclasses
import enum
import functools
import time
from typing import Optional, Tuple

import numba
import numpy as np
import scipy.sparse as sp

from .linalg import (KktSystem, LdlFactor, SparseMatrixCsc, _refined_solve,
                     assemble_kkt, ldl_factor, update_rho_entries)

RESIDUAL_FLOOR = 1e-12


class Status(enum.Enum):
    RUNNING = "Running"
    SOLVED = "Solved"
    ITERATION_LIMIT = "IterationLimit"
    TIME_LIMIT = "TimeLimit"
    NON_CONVERGENT = "NonConvergent"

    def __str__(self):
        return self.value


@dataclasses.dataclass(eq=False)
class QpProblem:
    P: SparseMatrixCsc
    q: np.ndarray
    A: SparseMatrixCsc
    l: np.ndarray
    u: np.ndarray
    name: str = "qp"

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64).reshape(-1)
        self.l = np.asarray(self.l, dtype=np.float64).reshape(-1)
        self.u = np.asarray(self.u, dtype=np.float64).reshape(-1)
        n, m = self.q.shape[0], self.l.shape[0]
        if self.P.shape != (n, n):
            raise ValueError(f"P has shape {self.P.shape}, expected {(n, n)}")
        if self.A.shape != (m, n):
            raise ValueError(f"A has shape {self.A.shape}, expected {(m, n)}")
        if self.u.shape != (m,):
            raise ValueError("l and u differ in length")
        if np.any(self.l > self.u):
            raise ValueError("l <= u violated")
        if np.any(np.isnan(self.l)) or np.any(np.isnan(self.u)) or not np.all(np.isfinite(self.q)):
            raise ValueError("problem data contains NaN")
        # Keep only the upper triangle of P.
        self.P = SparseMatrixCsc.from_scipy(sp.triu(self.P.to_scipy(), format="csc"))

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def m(self) -> int:
        return self.l.shape[0]

    @property
    def nnz(self) -> int:
        """Stored nonzeros of the full symmetric P plus those of A."""
        return self.P_full.nnz + self.A.nnz

    @functools.cached_property
    def P_full(self) -> sp.csr_matrix:
        Pu = self.P.to_scipy()
        return (Pu + sp.triu(Pu, 1).T).tocsr()

    @functools.cached_property
    def A_csr(self) -> sp.csr_matrix:
        return self.A.to_scipy().tocsr()

    @functools.cached_property
    def At_csr(self) -> sp.csr_matrix:
        return self.A.to_scipy().T.tocsr()

    def objective(self, x) -> float:
        return float(0.5 * x @ (self.P_full @ x) + self.q @ x)


@dataclasses.dataclass
class SolverSettings:
    sigma: float = 1e-6
    eps_abs: float = 1e-3
    eps_rel: float = 1e-3
    max_iter: int = 200000
    adapt_interval: int = 100
    rho_bounds: Tuple[float, float] = (1e-6, 1e6)
    time_limit: Optional[float] = None
    check_termination: int = 25
    rho_bar_init: float = 0.1
    equality_rho_scale: float = 1e3
    # Refactor only when some rho entry moves by more than this factor.
    rho_tol: float = 5.0
    # Training disables the rho_tol guard and always applies the new rho.
    always_adapt: bool = False

    def __post_init__(self):
        positive = dict(sigma=self.sigma, eps_abs=self.eps_abs, eps_rel=self.eps_rel,
                        max_iter=self.max_iter, adapt_interval=self.adapt_interval,
                        check_termination=self.check_termination, rho_bar_init=self.rho_bar_init,
                        equality_rho_scale=self.equality_rho_scale, rho_tol=self.rho_tol)
        for key, val in positive.items():
            if not val > 0:
                raise ValueError(f"{key} must be positive, got {val}")
        lo, hi = self.rho_bounds
        if not 0 < lo < hi:
            raise ValueError("rho_bounds must satisfy 0 < lo < hi")
        if self.adapt_interval % self.check_termination:
            raise ValueError("adapt_interval must be a multiple of check_termination")
        if self.time_limit is not None and not self.time_limit > 0:
            raise ValueError("time_limit must be positive")


@dataclasses.dataclass
class SolverState:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    rho: np.ndarray
    rho_bar: float
    iter: int = 0
    xi_primal: float = np.inf
    xi_dual: float = np.inf
    status: Status = Status.RUNNING
    # A x at the current iterate, refreshed with the residuals.
    ax: Optional[np.ndarray] = None

    def copy(self) -> "SolverState":
        return dataclasses.replace(self, x=self.x.copy(), y=self.y.copy(), z=self.z.copy(),
                                   rho=self.rho.copy(),
                                   ax=None if self.ax is None else self.ax.copy())


@dataclasses.dataclass
class SolveResult:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    status: Status
    iterations: int
    solve_time: float
    adapt_count: int
    objective: float
    rho: np.ndarray
    xi_primal: float
    xi_dual: float
    message: str = ""


def rho_from_scalar(rho_bar: float, l, u, scale: float = 1e3,
                    rho_bounds=(1e-6, 1e6)) -> np.ndarray:
    """Expand rho_bar to a vector, scaling equality rows (l_i == u_i) by ``scale``."""
    l = np.asarray(l, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    rho = np.where(l == u, rho_bar * scale, rho_bar).astype(np.float64)
    return np.clip(rho, rho_bounds[0], rho_bounds[1])


def heuristic_rho_update(state: SolverState, rho_bounds=(1e-6, 1e6)) -> float:
    """rho_bar <- rho_bar * sqrt(xi_primal / xi_dual), guarded and clamped."""
    p = max(state.xi_primal, RESIDUAL_FLOOR)
    d = max(state.xi_dual, RESIDUAL_FLOOR)
    return float(np.clip(state.rho_bar * np.sqrt(p / d), rho_bounds[0], rho_bounds[1]))


@numba.njit(cache=True)
def _admm_kernel(iters, n, m, x, y, z, rho, l, u, q, sigma,
                 perm, Lp, Li, Lx, Dinv, Kp, Ki, Kx):
    nk = n + m
    rhs = np.empty(nk)
    sol = np.empty(nk)
    work = np.empty(nk)
    resid = np.empty(nk)
    for _ in range(iters):
        for i in range(n):
            rhs[i] = sigma * x[i] - q[i]
        for i in range(m):
            rhs[n + i] = z[i] - y[i] / rho[i]
        _refined_solve(nk, perm, Lp, Li, Lx, Dinv, Kp, Ki, Kx, rhs, sol, work, resid)
        for i in range(n):
            x[i] = sol[i]
        for i in range(m):
            zt = z[i] + (sol[n + i] - y[i]) / rho[i]
            zn = zt + y[i] / rho[i]
            if zn < l[i]:
                zn = l[i]
            elif zn > u[i]:
                zn = u[i]
            y[i] = y[i] + rho[i] * (zt - zn)
            z[i] = zn


def admm_iterate(state: SolverState, problem: QpProblem, factor: LdlFactor,
                 sigma: float, iters: int = 1) -> SolverState:
    """Advance ``state`` in place by ``iters`` ADMM iterations and return it."""
    n, m = problem.n, problem.m
    if factor.D.shape[0] != n + m:
        raise AssertionError("factor does not match problem dimensions")
    K = factor.K
    _admm_kernel(iters, n, m, state.x, state.y, state.z, state.rho, problem.l, problem.u,
                 problem.q, sigma, factor.perm, factor.L.col_ptr, factor.L.row_idx,
                 factor.L.values, factor.Dinv, K.col_ptr, K.row_idx, K.values)
    state.iter += iters
    state.ax = None
    return state


def compute_residuals(state: SolverState, problem: QpProblem) -> Tuple[float, float]:
    """Infinity norms of A x - z and P x + q + A'y."""
    ax = problem.A_csr @ state.x
    state.ax = ax
    xi_p = float(np.max(np.abs(ax - state.z), initial=0.0))
    xi_d = float(np.max(np.abs(problem.P_full @ state.x + problem.q + problem.At_csr @ state.y),
                        initial=0.0))
    state.xi_primal, state.xi_dual = xi_p, xi_d
    return xi_p, xi_d


def _inf(v) -> float:
    return float(np.max(np.abs(v), initial=0.0))


def is_solved(state: SolverState, settings: SolverSettings, problem: QpProblem) -> bool:
    ax = state.ax if state.ax is not None else problem.A_csr @ state.x
    tol_p = settings.eps_abs + settings.eps_rel * max(_inf(ax), _inf(state.z))
    tol_d = settings.eps_abs + settings.eps_rel * max(
        _inf(problem.P_full @ state.x), _inf(problem.q), _inf(problem.At_csr @ state.y))
    return state.xi_primal <= tol_p and state.xi_dual <= tol_d


def check_termination(state: SolverState, settings: SolverSettings, problem: QpProblem,
                      elapsed: Optional[float] = None) -> Status:
    if is_solved(state, settings, problem):
        return Status.SOLVED
    if not (np.isfinite(state.xi_primal) and np.isfinite(state.xi_dual)):
        return Status.NON_CONVERGENT
    if state.iter >= settings.max_iter:
        return Status.ITERATION_LIMIT
    if settings.time_limit is not None and elapsed is not None and elapsed >= settings.time_limit:
        return Status.TIME_LIMIT
    return Status.RUNNING


class Solver:
    """Workspace that owns the KKT system, its factor and the iterates."""

    def __init__(self, problem: QpProblem, settings: Optional[SolverSettings] = None,
                 warm_start=None, rho=None, rho_bar: Optional[float] = None):
        self.problem = problem
        self.settings = settings = settings or SolverSettings()
        n, m = problem.n, problem.m
        rho_bar = settings.rho_bar_init if rho_bar is None else rho_bar
        if rho is None:
            rho = rho_from_scalar(rho_bar, problem.l, problem.u,
                                  settings.equality_rho_scale, settings.rho_bounds)
        rho = np.clip(np.asarray(rho, dtype=np.float64), *settings.rho_bounds)
        if warm_start is None:
            x, y = np.zeros(n), np.zeros(m)
            z = np.zeros(m)
        else:
            x, y = warm_start
            x = np.array(x, dtype=np.float64)
            y = np.array(y, dtype=np.float64)
            if x.shape != (n,) or y.shape != (m,):
                raise ValueError("warm start has wrong dimensions")
            z = np.clip(problem.A_csr @ x, problem.l, problem.u)
        self.state = SolverState(x, y, z, rho, float(rho_bar))
        self.kkt: KktSystem = assemble_kkt(problem.P, problem.A, settings.sigma, rho)
        self.factor: LdlFactor = ldl_factor(self.kkt)
        self.adapt_count = 0
        self.factor_count = 1
        self.elapsed = 0.0

    def set_rho(self, rho, rho_bar: Optional[float] = None) -> None:
        lo, hi = self.settings.rho_bounds
        rho = np.clip(np.asarray(rho, dtype=np.float64), lo, hi)
        update_rho_entries(self.kkt, rho)
        self.factor = ldl_factor(self.kkt)
        self.state.rho = rho
        if rho_bar is not None:
            self.state.rho_bar = float(rho_bar)
        self.adapt_count += 1
        self.factor_count += 1

    def run(self, iters: int) -> Status:
        """Run up to ``iters`` iterations, checking termination at the usual cadence."""
        st, s = self.state, self.settings
        t0 = time.perf_counter()
        done = 0
        status = Status.RUNNING
        while done < iters:
            chunk = min(s.check_termination - st.iter % s.check_termination, iters - done,
                        s.max_iter - st.iter)
            if chunk <= 0:
                break
            admm_iterate(st, self.problem, self.factor, s.sigma, chunk)
            done += chunk
            if st.iter % s.check_termination == 0 or st.iter >= s.max_iter:
                compute_residuals(st, self.problem)
                status = check_termination(st, s, self.problem,
                                           self.elapsed + time.perf_counter() - t0)
                if status is not Status.RUNNING:
                    break
        if st.iter >= s.max_iter and status is Status.RUNNING:
            compute_residuals(st, self.problem)
            status = check_termination(st, s, self.problem)
        self.elapsed += time.perf_counter() - t0
        st.status = status
        return status

    def adapt(self, policy) -> bool:
        """Query ``policy`` for a new rho; refactor when the change is large enough."""
        st, s = self.state, self.settings
        if st.ax is None:
            compute_residuals(st, self.problem)
        new_rho, new_bar = policy.decide(st, self.problem)
        new_rho = np.clip(np.asarray(new_rho, dtype=np.float64), *s.rho_bounds)
        if new_rho.shape != st.rho.shape or not np.all(np.isfinite(new_rho)):
            raise ValueError("policy returned an invalid rho vector")
        if st.rho.size == 0:
            st.rho_bar = float(new_bar)
            return False
        ratio = np.max(np.maximum(new_rho / st.rho, st.rho / new_rho))
        if s.always_adapt or ratio > s.rho_tol:
            self.set_rho(new_rho, new_bar)
            return True
        return False

    def result(self) -> SolveResult:
        st = self.state
        if st.ax is None:
            compute_residuals(st, self.problem)
        return SolveResult(st.x.copy(), st.y.copy(), st.z.copy(), st.status, st.iter,
                           self.elapsed, self.adapt_count, self.problem.objective(st.x),
                           st.rho.copy(), st.xi_primal, st.xi_dual)


def solve(problem: QpProblem, settings: Optional[SolverSettings] = None, policy=None,
          warm_start=None) -> SolveResult:
    """Solve ``problem``, consulting ``policy`` every ``adapt_interval`` iterations.

    ``policy`` defaults to the residual-balancing heuristic.
    """
    from .policy import HeuristicPolicy

    settings = settings or SolverSettings()
    policy = policy if policy is not None else HeuristicPolicy()
    t0 = time.perf_counter()
    solver = Solver(problem, settings, warm_start=warm_start,
                    rho_bar=getattr(policy, "rho_bar_init", None))
    solver.elapsed = time.perf_counter() - t0
    message = ""
    while True:
        status = solver.run(settings.adapt_interval)
        if status is not Status.RUNNING:
            break
        t1 = time.perf_counter()
        try:
            solver.adapt(policy)
        except Exception as exc:  # policy failures end the solve, not the process
            solver.state.status = Status.NON_CONVERGENT
            message = f"policy failure: {exc!r}"
            break
        finally:
            solver.elapsed += time.perf_counter() - t1
    res = solver.result()
    res.message = message
    return res

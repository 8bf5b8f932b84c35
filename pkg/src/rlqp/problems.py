"""Randomized QP generators, feasible by construction, and dimension schedules."""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Dict, List, Tuple

import numpy as np
import scipy.sparse as sp

from .linalg import SparseMatrixCsc
from .solver import QpProblem

SCHEDULES: Dict[str, Tuple[int, ...]] = {
    "random": (10, 11, 12, 13, 15, 18, 23, 29, 39, 53, 73, 103, 146, 211, 304, 442, 644, 940,
               1373, 2009),
    "portfolio": (5, 6, 7, 8, 9, 10, 12, 14, 16, 20, 24, 28, 35, 43, 52, 65, 80, 99, 124, 154),
    "control": (10, 11, 12, 13, 14, 16, 17, 20, 23, 26, 31, 37, 45, 55, 68, 84, 105, 132, 166,
                209),
}
SCHEDULES["eq"] = SCHEDULES["random"]
# One-parameter family used to probe scalar policies; not one of the benchmark classes.
SCHEDULES["scaled"] = (20,)
for _name in ("huber", "svm", "lasso"):
    SCHEDULES[_name] = SCHEDULES["control"]

ALIASES = {"randomqp": "random", "eqconstrainedqp": "eq", "eqqp": "eq"}


@dataclasses.dataclass(frozen=True)
class GeneratorSpec:
    cls: str
    dim: int
    seed: int = 0
    density: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "cls", canonical_class(self.cls))
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if not 0 < self.density <= 1:
            raise ValueError("density must lie in (0, 1]")

    @classmethod
    def parse(cls, text: str) -> "GeneratorSpec":
        """Parse ``class:dim:seed``."""
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"expected class:dim:seed, got {text!r}")
        return cls(parts[0], int(parts[1]), int(parts[2]))


def canonical_class(name: str) -> str:
    key = name.lower()
    key = ALIASES.get(key, key)
    if key not in SCHEDULES:
        raise ValueError(f"unknown problem class {name!r}")
    return key


def _sprandn(rows, cols, density, rng) -> sp.csc_matrix:
    return sp.random(rows, cols, density=density, format="csc", random_state=rng,
                     data_rvs=rng.standard_normal)


def _constraint_matrix(m, n, density, rng) -> sp.csr_matrix:
    A = _sprandn(m, n, density, rng).tolil()
    for i in range(m):
        if A.rows[i] == []:
            A[i, rng.integers(n)] = rng.standard_normal()
    return A.tocsr()


def _cost(n, density, rng):
    M = _sprandn(n, n, density, rng)
    P = (M @ M.T + 1e-2 * sp.eye(n)).tocsc()
    return P


def gen_random_qp(spec: GeneratorSpec, return_witness: bool = False):
    """Inequality QP: l = A x0 - |xi'|, u = A x0 + |xi| around a sampled x0."""
    rng = np.random.default_rng([spec.seed, spec.dim, 1])
    n = spec.dim
    m = 10 * math.ceil(n / 10)
    P = _cost(n, spec.density, rng)
    A = _constraint_matrix(m, n, spec.density, rng)
    x0 = rng.standard_normal(n)
    ax0 = A @ x0
    u = ax0 + np.abs(rng.standard_normal(m))
    l = ax0 - np.abs(rng.standard_normal(m))
    q = rng.standard_normal(n)
    prob = QpProblem(SparseMatrixCsc.from_scipy(sp.triu(P)), q, SparseMatrixCsc.from_scipy(A),
                     l, u, name=f"random_{n}_{spec.seed}")
    return (prob, x0) if return_witness else prob


def gen_eq_qp(spec: GeneratorSpec, return_witness: bool = False):
    """Equality-constrained QP with l = u = A x0."""
    rng = np.random.default_rng([spec.seed, spec.dim, 2])
    n = spec.dim
    m = math.ceil(n / 2)
    P = _cost(n, spec.density, rng)
    A = _constraint_matrix(m, n, spec.density, rng)
    x0 = rng.standard_normal(n)
    b = A @ x0
    q = rng.standard_normal(n)
    prob = QpProblem(SparseMatrixCsc.from_scipy(sp.triu(P)), q, SparseMatrixCsc.from_scipy(A),
                     b, b.copy(), name=f"eq_{n}_{spec.seed}")
    return (prob, x0) if return_witness else prob


def gen_scaled_qp(spec: GeneratorSpec, return_witness: bool = False, theta=None):
    """Random inequality QP whose objective (P and q) is scaled by theta.

    theta is drawn log-uniformly from [1e-3, 1e3] by the seed unless given;
    the best fixed rho_bar moves in proportion to it.
    """
    if theta is None:
        theta = scaled_theta(spec.seed)
    base, x0 = gen_random_qp(GeneratorSpec("random", spec.dim, spec.seed, spec.density),
                             return_witness=True)
    prob = QpProblem(SparseMatrixCsc.from_scipy(base.P.to_scipy() * theta), base.q * theta,
                     base.A, base.l, base.u, name=f"scaled_{spec.dim}_{spec.seed}")
    return (prob, x0) if return_witness else prob


def scaled_theta(seed: int) -> float:
    rng = np.random.default_rng([seed, 3])
    return float(10.0 ** rng.uniform(-3.0, 3.0))


def _not_implemented(cls_name):
    def gen(spec, return_witness=False):
        raise NotImplementedError(f"generator for class {cls_name!r} is not implemented")
    return gen


GENERATORS: Dict[str, Callable] = {
    "random": gen_random_qp,
    "eq": gen_eq_qp,
    "scaled": gen_scaled_qp,
    **{c: _not_implemented(c) for c in ("control", "huber", "svm", "lasso", "portfolio")},
}


def generate(spec: GeneratorSpec, return_witness: bool = False):
    return GENERATORS[spec.cls](spec, return_witness)


def schedule_default(cls: str) -> List[int]:
    return list(SCHEDULES[canonical_class(cls)])


class ProblemSampler:
    """Draws problems of one or more classes with dims in [lo, hi] from a seed stream.

    Training and test samplers should use disjoint ``seed_offset`` ranges.
    """

    def __init__(self, classes=("random",), dims=(10, 50), seed_offset=0):
        self.classes = tuple(canonical_class(c) for c in classes)
        self.dims = dims
        self.seed_offset = seed_offset

    def spec(self, index: int) -> GeneratorSpec:
        rng = np.random.default_rng([self.seed_offset, index, 7])
        cls = self.classes[rng.integers(len(self.classes))]
        dim = int(rng.integers(self.dims[0], self.dims[1] + 1))
        return GeneratorSpec(cls, dim, seed=self.seed_offset + index)

    def __call__(self, index: int) -> QpProblem:
        return generate(self.spec(index))

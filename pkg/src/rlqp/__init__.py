"""ADMM quadratic-program solver with learned step-size (rho) adaptation."""

from .linalg import SparseMatrixCsc, assemble_kkt, ldl_factor, ldl_solve, update_rho_entries
from .policy import FixedPolicy, HeuristicPolicy, ScalarNetPolicy, VectorNetPolicy
from .problems import GeneratorSpec, generate
from .qps import parse_qps, read_qps, to_qp, write_qps
from .solver import QpProblem, SolverSettings, Status, solve

__version__ = "0.1.0"

__all__ = [
    "SparseMatrixCsc", "assemble_kkt", "ldl_factor", "ldl_solve", "update_rho_entries",
    "FixedPolicy", "HeuristicPolicy", "ScalarNetPolicy", "VectorNetPolicy",
    "GeneratorSpec", "generate", "parse_qps", "read_qps", "to_qp", "write_qps",
    "QpProblem", "SolverSettings", "Status", "solve",
]

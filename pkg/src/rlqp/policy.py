"""Rho adaptation policies and the observations they consume.

Every policy exposes ``decide(state, problem) -> (rho, rho_bar)``; calling
the policy returns just the rho vector.  Policies hold no mutable state, so
one instance may serve several solvers.
"""

from __future__ import annotations

from typing import NamedTuple, Tuple

import numpy as np

from .nn import MlpParams, MlpSpec, forward_rows, load_weights
from .solver import QpProblem, SolverState, heuristic_rho_update, rho_from_scalar

DEFAULT_RHO_BOUNDS = (1e-6, 1e6)

# Scale of the action decoding: a in (-1, 1) maps onto rho in (1e-6, 1e6).
ACTION_EXPONENT = 6.0

SCALAR_OBS_WIDTH = 2
VECTOR_OBS_WIDTH = 6

# Column order of featurize_vector.
CONSTRAINT_FEATURES = ("log_bound_gap", "z_minus_ax", "y", "log_rho", "log_xi_primal",
                       "log_xi_dual")


class ScalarObservation(NamedTuple):
    log_xi_primal: float
    log_xi_dual: float

    def normalized(self) -> np.ndarray:
        return np.array([self.log_xi_primal, self.log_xi_dual]) / 10.0


def featurize_scalar(state: SolverState) -> ScalarObservation:
    lp = np.log10(np.clip(state.xi_primal, 1e-10, 1e10))
    ld = np.log10(np.clip(state.xi_dual, 1e-10, 1e10))
    return ScalarObservation(float(lp), float(ld))


def featurize_vector(state: SolverState, problem: QpProblem) -> np.ndarray:
    """Per-constraint features, shape (m, 6), columns as in CONSTRAINT_FEATURES."""
    ax = state.ax if state.ax is not None else problem.A_csr @ state.x
    z = state.z
    with np.errstate(invalid="ignore"):
        gap = np.minimum(z - problem.l, problem.u - z)
    gap = np.nan_to_num(gap, nan=1e6, posinf=1e6, neginf=1e-8)
    feats = np.empty((problem.m, VECTOR_OBS_WIDTH))
    feats[:, 0] = np.log10(np.clip(gap, 1e-8, 1e6))
    feats[:, 1] = np.clip(z - ax, -1e6, 1e6)
    feats[:, 2] = np.clip(state.y, -1e6, 1e6)
    feats[:, 3] = np.log10(np.clip(state.rho, 1e-6, 1e6))
    feats[:, 4] = np.log10(np.clip(state.xi_primal, 1e-6, 1e6))
    feats[:, 5] = np.log10(np.clip(state.xi_dual, 1e-6, 1e6))
    return feats


def normalize_vector_features(feats: np.ndarray) -> np.ndarray:
    """Fixed affine map of each feature onto roughly [-1, 1]."""
    out = np.empty_like(feats)
    out[:, 0] = (feats[:, 0] + 1.0) / 7.0
    out[:, 1:3] = feats[:, 1:3] / 1e6
    out[:, 3:6] = feats[:, 3:6] / 6.0
    return out


def decode_action(a, rho_bounds=DEFAULT_RHO_BOUNDS):
    """Network action in [-1, 1] -> rho = 10**(6 a), clamped."""
    return np.clip(10.0 ** (ACTION_EXPONENT * np.asarray(a, dtype=np.float64)), *rho_bounds)


def encode_rho(rho) -> np.ndarray:
    """Inverse of decode_action on the unclamped range."""
    return np.log10(np.asarray(rho, dtype=np.float64)) / ACTION_EXPONENT


class RhoPolicy:
    name = "policy"
    rho_bar_init = None

    def decide(self, state: SolverState, problem: QpProblem) -> Tuple[np.ndarray, float]:
        raise NotImplementedError

    def __call__(self, state: SolverState, problem: QpProblem) -> np.ndarray:
        return self.decide(state, problem)[0]


class FixedPolicy(RhoPolicy):
    """Keeps rho where it is; optionally seeds the initial rho_bar."""

    name = "fixed"

    def __init__(self, rho_bar_init=None):
        self.rho_bar_init = rho_bar_init

    def decide(self, state, problem):
        return state.rho.copy(), state.rho_bar


class HeuristicPolicy(RhoPolicy):
    """Residual balancing: rho_bar <- rho_bar * sqrt(xi_primal / xi_dual)."""

    name = "heuristic"

    def __init__(self, rho_bounds=DEFAULT_RHO_BOUNDS, equality_scale=1e3):
        self.rho_bounds = rho_bounds
        self.equality_scale = equality_scale

    def decide(self, state, problem):
        rho_bar = heuristic_rho_update(state, self.rho_bounds)
        return (rho_from_scalar(rho_bar, problem.l, problem.u, self.equality_scale,
                                self.rho_bounds), rho_bar)


class _NetPolicy(RhoPolicy):
    obs_width = 0

    def __init__(self, params: MlpParams, spec: MlpSpec, rho_bounds=DEFAULT_RHO_BOUNDS,
                 equality_scale=1e3, name=None):
        if spec.input_width != self.obs_width or spec.output_width != 1:
            raise ValueError(f"{type(self).__name__} needs a {self.obs_width}->1 network, "
                             f"got {spec.input_width}->{spec.output_width}")
        params.check(spec)
        self.params, self.spec = params, spec
        self.rho_bounds = rho_bounds
        self.equality_scale = equality_scale
        if name:
            self.name = name

    @classmethod
    def from_file(cls, path, **kw):
        params, spec = load_weights(path)
        return cls(params, spec, **kw)


class ScalarNetPolicy(_NetPolicy):
    name = "scalar"
    obs_width = SCALAR_OBS_WIDTH

    def action(self, obs: ScalarObservation) -> float:
        return float(forward_rows(self.params, self.spec, obs.normalized()[None, :])[0, 0])

    def rho_bar_from_obs(self, obs: ScalarObservation) -> float:
        return float(decode_action(self.action(obs), self.rho_bounds))

    def decide(self, state, problem):
        rho_bar = self.rho_bar_from_obs(featurize_scalar(state))
        return (rho_from_scalar(rho_bar, problem.l, problem.u, self.equality_scale,
                                self.rho_bounds), rho_bar)


class VectorNetPolicy(_NetPolicy):
    name = "vector"
    obs_width = VECTOR_OBS_WIDTH

    def actions(self, feats: np.ndarray) -> np.ndarray:
        if feats.shape[0] == 0:
            return np.zeros(0)
        return forward_rows(self.params, self.spec, normalize_vector_features(feats))[:, 0]

    def rho_from_obs(self, feats: np.ndarray) -> np.ndarray:
        return decode_action(self.actions(feats), self.rho_bounds)

    def decide(self, state, problem):
        return self.rho_from_obs(featurize_vector(state, problem)), state.rho_bar


def policy_fixed(state: SolverState) -> np.ndarray:
    return state.rho.copy()


def policy_heuristic(state: SolverState, problem: QpProblem, rho_bounds=DEFAULT_RHO_BOUNDS,
                     equality_scale=1e3) -> np.ndarray:
    return HeuristicPolicy(rho_bounds, equality_scale)(state, problem)


def policy_scalar_net(obs: ScalarObservation, policy: ScalarNetPolicy, problem: QpProblem):
    rho_bar = policy.rho_bar_from_obs(obs)
    return rho_from_scalar(rho_bar, problem.l, problem.u, policy.equality_scale,
                           policy.rho_bounds)


def policy_vector_net(feats: np.ndarray, policy: VectorNetPolicy) -> np.ndarray:
    return policy.rho_from_obs(feats)

"""TD3 training of rho policies.

Scalar mode learns one rho_bar per step from (log xi_primal, log xi_dual).
Vector mode applies one shared policy to every constraint row and stores one
transition per row, all sharing the step's reward.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional

import numpy as np

from .nn import (AdamState, MlpParams, MlpSpec, adam_step, backward, forward, init_params,
                 polyak_update, save_weights)
from .policy import (SCALAR_OBS_WIDTH, VECTOR_OBS_WIDTH, ScalarNetPolicy, VectorNetPolicy,
                     decode_action, featurize_scalar, featurize_vector, normalize_vector_features)
from .solver import QpProblem, Solver, SolverSettings, Status, rho_from_scalar

log = logging.getLogger(__name__)

SCALAR, VECTOR = "scalar", "vector"


@dataclasses.dataclass
class Td3Config:
    exploration_noise_sigma: float = 1.0
    target_noise_sigma: float = 0.2
    noise_clip: float = 2.5
    polyak: float = 0.995
    batch_size: int = 256
    initial_random_steps: int = 1000
    update_every: int = 500
    steps_per_epoch: int = 2000
    actor_delay: int = 2
    gamma: float = 0.99
    lr: float = 1e-5
    replay_capacity: int = 1_000_000
    step_limit: int = 50
    inner_iters: int = 100
    test_episodes: int = 10
    hidden: tuple = (48, 48, 48)

    def __post_init__(self):
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if f.name in ("hidden",):
                continue
            if f.name in ("gamma",):
                if not 0 <= val < 1:
                    raise ValueError("gamma must lie in [0, 1)")
            elif f.name == "polyak":
                if not 0 <= val < 1:
                    raise ValueError("polyak must lie in [0, 1)")
            elif f.name in ("target_noise_sigma", "test_episodes"):
                if val < 0:
                    raise ValueError(f"{f.name} must be nonnegative")
            elif not val > 0:
                raise ValueError(f"{f.name} must be positive")


PRESETS = {
    # Values reported for the full-scale runs.
    "paper": Td3Config(exploration_noise_sigma=1.0, noise_clip=2.5, polyak=0.995,
                       batch_size=5000, initial_random_steps=100_000, update_every=10_000,
                       steps_per_epoch=20_000, lr=1e-5, replay_capacity=400_000_000),
    # Laptop-sized profile.
    "desk": Td3Config(exploration_noise_sigma=0.1, noise_clip=2.5, polyak=0.995,
                      batch_size=256, initial_random_steps=1000, update_every=500,
                      steps_per_epoch=2000, lr=1e-3, replay_capacity=1_000_000),
}


def preset(name: str, **overrides) -> Td3Config:
    return dataclasses.replace(PRESETS[name], **overrides)


# --------------------------------------------------------------------------
# Replay buffer
# --------------------------------------------------------------------------

class ReplayBuffer:
    """Ring buffer of (s, a, r, s', done) with uniform sampling."""

    def __init__(self, capacity: int, obs_width: int):
        self.capacity = int(capacity)
        self.s = np.zeros((self.capacity, obs_width))
        self.s2 = np.zeros((self.capacity, obs_width))
        self.a = np.zeros(self.capacity)
        self.r = np.zeros(self.capacity)
        self.done = np.zeros(self.capacity)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, s, a, r, s2, done) -> None:
        """Append one transition, or a batch when ``s`` is 2-D (``r``/``done`` broadcast)."""
        s = np.atleast_2d(s)
        s2 = np.atleast_2d(s2)
        k = s.shape[0]
        a = np.broadcast_to(np.asarray(a, dtype=np.float64).reshape(-1), (k,))
        idx = (self.cursor + np.arange(k)) % self.capacity
        self.s[idx] = s
        self.s2[idx] = s2
        self.a[idx] = a
        self.r[idx] = r
        self.done[idx] = float(done)
        self.cursor = int((self.cursor + k) % self.capacity)
        self.size = min(self.size + k, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        if self.size < batch_size:
            raise ValueError(f"buffer holds {self.size} transitions, need {batch_size}")
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx]


# --------------------------------------------------------------------------
# Environment
# --------------------------------------------------------------------------

class QpEnv:
    """One QP, advanced ``inner_iters`` ADMM iterations per step.

    Resetting runs the solver's first segment at the initial rho so the first
    observation matches what a policy sees at its first adaptation in
    :func:`rlqp.solver.solve`.
    """

    def __init__(self, problem: QpProblem, mode: str = VECTOR,
                 settings: Optional[SolverSettings] = None, inner_iters: int = 100,
                 step_limit: int = 50, warm_start=None, warmup: bool = True):
        if mode not in (SCALAR, VECTOR):
            raise ValueError(f"unknown mode {mode!r}")
        base = settings or SolverSettings()
        self.settings = dataclasses.replace(base, always_adapt=True)
        self.problem = problem
        self.mode = mode
        self.inner_iters = inner_iters
        self.step_limit = step_limit
        self.solver = Solver(problem, self.settings, warm_start=warm_start)
        self.steps_taken = 0
        self.done = False
        self.status = Status.RUNNING
        if warmup:
            self.status = self.solver.run(inner_iters)
            self.done = self.status is not Status.RUNNING
        else:
            from .solver import compute_residuals
            compute_residuals(self.solver.state, problem)

    @property
    def state(self):
        return self.solver.state

    @property
    def iterations(self) -> int:
        return self.solver.state.iter

    def observe(self) -> np.ndarray:
        if self.mode == SCALAR:
            return featurize_scalar(self.state).normalized()
        return normalize_vector_features(featurize_vector(self.state, self.problem))

    def decode(self, action):
        s = self.settings
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        if self.mode == SCALAR:
            rho_bar = float(decode_action(float(a.reshape(-1)[0]), s.rho_bounds))
            return rho_from_scalar(rho_bar, self.problem.l, self.problem.u,
                                   s.equality_rho_scale, s.rho_bounds), rho_bar
        a = a.reshape(-1)
        if a.shape[0] != self.problem.m:
            raise ValueError(f"expected {self.problem.m} actions, got {a.shape[0]}")
        return decode_action(a, s.rho_bounds), self.state.rho_bar

    def step(self, action):
        if self.done:
            raise RuntimeError("step called on a finished episode")
        rho, rho_bar = self.decode(action)
        if self.problem.m:
            self.solver.set_rho(rho, rho_bar)
        self.status = self.solver.run(self.inner_iters)
        self.steps_taken += 1
        solved = self.status is Status.SOLVED
        self.done = solved or self.status is not Status.RUNNING or \
            self.steps_taken >= self.step_limit
        return self.observe(), (0.0 if solved else -1.0), self.done


def env_reset(generator: Callable[[int], QpProblem], seed: int, mode: str = VECTOR,
              settings: Optional[SolverSettings] = None, inner_iters: int = 100,
              step_limit: int = 50):
    env = QpEnv(generator(seed), mode, settings, inner_iters, step_limit)
    return env, env.observe()


def env_step(env: QpEnv, action):
    return env.step(action)


# --------------------------------------------------------------------------
# Networks
# --------------------------------------------------------------------------

class MlpCritic:
    """Q(s, a) on the concatenated input [s, a]."""

    def __init__(self, params: MlpParams, spec: MlpSpec):
        self.params, self.spec = params, spec

    def q(self, s, a) -> np.ndarray:
        out, _ = forward(self.params, self.spec, np.column_stack([s, a]))
        return out[:, 0]

    def grad_a(self, s, a) -> np.ndarray:
        x = np.column_stack([s, a])
        out, tape = forward(self.params, self.spec, x)
        _, gx = backward(self.params, tape, np.ones_like(out))
        return gx[:, -1]


@dataclasses.dataclass
class Td3Agent:
    obs_width: int
    config: Td3Config
    rng: np.random.Generator
    actor_spec: MlpSpec
    critic_spec: MlpSpec
    actor: MlpParams
    q1: MlpParams
    q2: MlpParams
    actor_t: MlpParams
    q1_t: MlpParams
    q2_t: MlpParams
    actor_opt: AdamState
    q1_opt: AdamState
    q2_opt: AdamState
    critic_updates: int = 0

    @classmethod
    def create(cls, obs_width: int, config: Td3Config, rng: np.random.Generator):
        aspec = MlpSpec(obs_width, 1, config.hidden, "relu", "tanh")
        cspec = MlpSpec(obs_width + 1, 1, config.hidden, "relu", "identity")
        actor = init_params(aspec, rng)
        q1 = init_params(cspec, rng)
        q2 = init_params(cspec, rng)
        return cls(obs_width, config, rng, aspec, cspec, actor, q1, q2,
                   actor.copy(), q1.copy(), q2.copy(),
                   AdamState.for_params(actor, config.lr), AdamState.for_params(q1, config.lr),
                   AdamState.for_params(q2, config.lr))

    def act(self, obs, noise: float = 0.0) -> np.ndarray:
        """Actions for a batch of observations, with clipped Gaussian noise."""
        obs = np.atleast_2d(obs)
        a, _ = forward(self.actor, self.actor_spec, obs)
        a = a[:, 0]
        if noise > 0:
            eps = np.clip(self.rng.normal(0.0, noise, size=a.shape),
                          -self.config.noise_clip, self.config.noise_clip)
            a = a + eps
        return np.clip(a, -1.0, 1.0)

    def policy(self, mode: str, **kw):
        cls = ScalarNetPolicy if mode == SCALAR else VectorNetPolicy
        return cls(self.actor.copy(), self.actor_spec, **kw)


def critic_targets(agent: Td3Agent, r, s2, done, smoothing: Optional[np.ndarray] = None):
    """r + gamma (1 - done) min(Q1', Q2')(s2, pi'(s2) + clipped noise)."""
    cfg = agent.config
    a2, _ = forward(agent.actor_t, agent.actor_spec, s2)
    a2 = a2[:, 0]
    if smoothing is None:
        smoothing = np.clip(agent.rng.normal(0.0, cfg.target_noise_sigma, size=a2.shape),
                            -cfg.noise_clip, cfg.noise_clip) if cfg.target_noise_sigma > 0 \
            else np.zeros_like(a2)
    a2 = np.clip(a2 + smoothing, -1.0, 1.0)
    q1 = MlpCritic(agent.q1_t, agent.critic_spec).q(s2, a2)
    q2 = MlpCritic(agent.q2_t, agent.critic_spec).q(s2, a2)
    return r + cfg.gamma * (1.0 - done) * np.minimum(q1, q2)


def td3_critic_update(buffer: ReplayBuffer, agent: Td3Agent, batch=None) -> float:
    """One Adam step on both critics; returns the summed MSE loss."""
    s, a, r, s2, done = batch if batch is not None else \
        buffer.sample(agent.config.batch_size, agent.rng)
    y = critic_targets(agent, r, s2, done)
    x = np.column_stack([s, a])
    loss = 0.0
    for params, opt in ((agent.q1, agent.q1_opt), (agent.q2, agent.q2_opt)):
        out, tape = forward(params, agent.critic_spec, x)
        err = out[:, 0] - y
        loss += float(np.mean(err ** 2))
        grads, _ = backward(params, tape, (2.0 * err / len(y))[:, None])
        adam_step(params, grads, opt)
    agent.critic_updates += 1
    return loss


def actor_gradient(actor: MlpParams, actor_spec: MlpSpec, critic, s):
    """Gradient of -mean Q(s, pi(s)) w.r.t. actor parameters, and that objective.

    ``critic`` needs ``q(s, a)`` and ``grad_a(s, a)``.
    """
    a, tape = forward(actor, actor_spec, s)
    a = a[:, 0]
    dq_da = critic.grad_a(s, a)
    grads, _ = backward(actor, tape, (-dq_da / len(a))[:, None])
    return grads, float(np.mean(critic.q(s, a)))


def td3_actor_update(buffer: ReplayBuffer, agent: Td3Agent, batch=None) -> float:
    """Ascend Q1(s, pi(s)) once, then move all target networks toward the online ones."""
    s = (batch if batch is not None else buffer.sample(agent.config.batch_size, agent.rng))[0]
    grads, objective = actor_gradient(agent.actor, agent.actor_spec,
                                      MlpCritic(agent.q1, agent.critic_spec), s)
    adam_step(agent.actor, grads, agent.actor_opt)
    for target, online in ((agent.actor_t, agent.actor), (agent.q1_t, agent.q1),
                           (agent.q2_t, agent.q2)):
        polyak_update(target, online, agent.config.polyak)
    return objective


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------

@dataclasses.dataclass
class TrainResult:
    policy: object
    log: List[dict]
    agent: Td3Agent
    buffer: ReplayBuffer
    best_epoch: int


def run_episode(policy_act: Callable, problem: QpProblem, mode: str, config: Td3Config,
                settings: Optional[SolverSettings] = None) -> int:
    """Roll one episode with a deterministic action function; return its length."""
    env = QpEnv(problem, mode, settings, config.inner_iters, config.step_limit)
    obs = env.observe()
    while not env.done:
        obs, _, _ = env.step(policy_act(obs))
    return env.steps_taken


def train(mode: str, generator: Callable[[int], QpProblem], config: Td3Config, epochs: int,
          seed: int = 0, settings: Optional[SolverSettings] = None,
          test_generator: Optional[Callable[[int], QpProblem]] = None,
          rollout_workers: int = 1, log_path=None, weights_path=None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train a TD3 policy on problems drawn from ``generator(index)``.

    The returned policy is the actor snapshot with the shortest mean test
    episode length over all epochs.
    """
    if mode not in (SCALAR, VECTOR):
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    obs_width = SCALAR_OBS_WIDTH if mode == SCALAR else VECTOR_OBS_WIDTH
    agent = Td3Agent.create(obs_width, config, rng)
    buffer = ReplayBuffer(config.replay_capacity, obs_width)
    test_generator = test_generator or (lambda i: generator(10**9 + i))
    workers = max(1, int(rollout_workers))
    pool = ThreadPoolExecutor(workers) if workers > 1 else None

    next_problem = 0

    def new_env():
        nonlocal next_problem
        while True:
            env = QpEnv(generator(next_problem), mode, settings, config.inner_iters,
                        config.step_limit)
            next_problem += 1
            if not env.done:
                return env

    envs = [new_env() for _ in range(workers)]
    obs = [e.observe() for e in envs]
    records: List[dict] = []
    best = (np.inf, agent.actor.copy(), 0)
    total_steps = 0
    log_file = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, epochs + 1):
            t_epoch = time.perf_counter()
            ep_lens, q_losses, pi_objs = [], [], []
            epoch_end = epoch * config.steps_per_epoch
            draining = False
            while True:
                active = [k for k, e in enumerate(envs) if e is not None]
                if not active:
                    break
                actions = {}
                for k in active:
                    if total_steps < config.initial_random_steps:
                        actions[k] = rng.uniform(-1.0, 1.0, size=obs[k].shape[0] if mode == VECTOR else 1)
                    else:
                        actions[k] = agent.act(obs[k], config.exploration_noise_sigma)
                if pool is not None:
                    outs = list(pool.map(lambda k: envs[k].step(actions[k]), active))
                else:
                    outs = [envs[k].step(actions[k]) for k in active]
                for k, (o2, r, done) in zip(active, outs):
                    solved = envs[k].status is Status.SOLVED
                    # Step-limit truncation keeps bootstrapping; only a solve is terminal.
                    if mode == SCALAR:
                        buffer.add(obs[k], actions[k][0], r, o2, solved)
                    elif o2.shape[0]:
                        buffer.add(obs[k], actions[k], r, o2, solved)
                    obs[k] = o2
                    total_steps += 1
                    if done:
                        ep_lens.append(envs[k].steps_taken)
                        if draining:
                            envs[k] = None
                        else:
                            envs[k] = new_env()
                            obs[k] = envs[k].observe()
                    if total_steps >= config.initial_random_steps and \
                            total_steps % config.update_every == 0 and len(buffer) >= config.batch_size:
                        for j in range(config.update_every):
                            q_losses.append(td3_critic_update(buffer, agent))
                            if agent.critic_updates % config.actor_delay == 0:
                                pi_objs.append(td3_actor_update(buffer, agent))
                if total_steps >= epoch_end:
                    if workers == 1:
                        break
                    draining = True
            if workers > 1:
                envs = [new_env() for _ in range(workers)]
                obs = [e.observe() for e in envs]

            test_lens = [run_episode(lambda o: agent.act(o), test_generator(i), mode, config,
                                     settings)
                         for i in range(config.test_episodes)]
            rec = dict(
                epoch=epoch,
                pi_loss=float(-np.mean(pi_objs)) if pi_objs else None,
                q_loss=float(np.mean(q_losses)) if q_losses else None,
                avg_q=float(np.mean(pi_objs)) if pi_objs else None,
                train_ep_len_avg=float(np.mean(ep_lens)) if ep_lens else None,
                train_ep_len_max=int(np.max(ep_lens)) if ep_lens else None,
                train_ep_len_std=float(np.std(ep_lens)) if ep_lens else None,
                test_ep_len_avg=float(np.mean(test_lens)) if test_lens else None,
            )
            records.append(rec)
            log.info("epoch %d (%.1fs): %s", epoch, time.perf_counter() - t_epoch, rec)
            if log_file:
                log_file.write(json.dumps(rec) + "\n")
                log_file.flush()
            if on_epoch:
                on_epoch(rec)
            if test_lens and np.mean(test_lens) <= best[0] and pi_objs:
                best = (float(np.mean(test_lens)), agent.actor.copy(), epoch)
    finally:
        if log_file:
            log_file.close()
        if pool is not None:
            pool.shutdown()

    cls = ScalarNetPolicy if mode == SCALAR else VectorNetPolicy
    policy = cls(best[1], agent.actor_spec)
    if weights_path:
        save_weights(policy.params, policy.spec, weights_path)
    return TrainResult(policy, records, agent, buffer, best[2])

import json

import numpy as np
import pytest

from rlqp.nn import MlpParams, MlpSpec, init_params, param_vector
from rlqp.policy import VectorNetPolicy
from rlqp.problems import GeneratorSpec, ProblemSampler, generate
from rlqp.rl import (MlpCritic, QpEnv, ReplayBuffer, Td3Agent, Td3Config, actor_gradient,
                     critic_targets, env_reset, env_step, preset, td3_actor_update,
                     td3_critic_update, train)
from rlqp.solver import SolverSettings, Status, rho_from_scalar, solve


def tiny_config(**kw):
    base = dict(hidden=(8, 8), batch_size=16, initial_random_steps=20, update_every=10,
                steps_per_epoch=40, lr=1e-3, step_limit=10, inner_iters=50, test_episodes=2,
                exploration_noise_sigma=0.3)
    base.update(kw)
    return Td3Config(**base)


def agent_for(width=6, seed=0, **kw):
    return Td3Agent.create(width, tiny_config(**kw), np.random.default_rng(seed))


# -- replay buffer -------------------------------------------------------------------

def test_replay_ring_wraps():
    b = ReplayBuffer(5, 2)
    for k in range(7):
        b.add(np.full(2, k), k, -1.0, np.full(2, k + 1), False)
    assert len(b) == 5
    assert sorted(b.a) == [2, 3, 4, 5, 6]


def test_replay_batch_add_broadcasts_reward():
    b = ReplayBuffer(100, 6)
    b.add(np.ones((4, 6)), np.arange(4.0), -1.0, np.zeros((4, 6)), True)
    assert len(b) == 4
    assert np.all(b.r[:4] == -1.0) and np.all(b.done[:4] == 1.0)


def test_replay_sample_requires_enough():
    b = ReplayBuffer(10, 1)
    b.add([0.0], 0.0, 0.0, [0.0], False)
    with pytest.raises(ValueError):
        b.sample(2, np.random.default_rng(0))


# -- critic targets --------------------------------------------------------------------

def test_targets_all_terminal_are_rewards_zero():
    ag = agent_for()
    s2 = np.random.default_rng(1).standard_normal((5, 6))
    assert np.array_equal(critic_targets(ag, np.zeros(5), s2, np.ones(5)), np.zeros(5))


def test_targets_gamma_zero_equals_rewards():
    ag = agent_for(gamma=0.0)
    s2 = np.random.default_rng(1).standard_normal((5, 6))
    r = -np.arange(5.0)
    assert np.array_equal(critic_targets(ag, r, s2, np.zeros(5)), r)


def _hand_forward(params, x, head):
    h = np.asarray(x, float)
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = np.array([sum(W[i, j] * h[j] for j in range(len(h))) + b[i] for i in range(len(b))])
        last = k == len(params.weights) - 1
        h = (np.tanh(z) if head == "tanh" else z) if last else np.maximum(z, 0.0)
    return h


def test_single_transition_target_by_hand():
    ag = agent_for(seed=3, gamma=0.9, noise_clip=0.5)
    s2 = np.array([[0.3, -0.1, 0.2, 0.5, -0.7, 0.05]])
    eps = np.array([0.8])  # clipped to 0.5
    y = critic_targets(ag, np.array([-1.0]), s2, np.array([0.0]), smoothing=np.clip(eps, -0.5, 0.5))
    a2 = float(np.clip(_hand_forward(ag.actor_t, s2[0], "tanh")[0] + 0.5, -1, 1))
    sa = np.concatenate([s2[0], [a2]])
    q1 = _hand_forward(ag.q1_t, sa, "identity")[0]
    q2 = _hand_forward(ag.q2_t, sa, "identity")[0]
    assert abs(y[0] - (-1.0 + 0.9 * min(q1, q2))) <= 1e-10


def test_critic_update_reduces_loss_on_fixed_batch():
    ag = agent_for(seed=4)
    rng = np.random.default_rng(0)
    batch = (rng.standard_normal((32, 6)), rng.uniform(-1, 1, 32), -np.ones(32),
             rng.standard_normal((32, 6)), np.ones(32))
    first = td3_critic_update(None, ag, batch)
    for _ in range(50):
        last = td3_critic_update(None, ag, batch)
    assert last < first
    assert ag.critic_updates == 51


# -- actor gradient -------------------------------------------------------------------

class QuadraticCritic:
    def __init__(self, a_star):
        self.a_star = a_star

    def q(self, s, a):
        return -(a - self.a_star) ** 2

    def grad_a(self, s, a):
        return -2.0 * (a - self.a_star)


class ConstantCritic:
    def q(self, s, a):
        return np.full(len(a), 3.0)

    def grad_a(self, s, a):
        return np.zeros(len(a))


def test_actor_gradient_quadratic_critic_closed_form():
    spec = MlpSpec(3, 1, (), output_activation="identity")
    rng = np.random.default_rng(0)
    actor = MlpParams([rng.standard_normal((1, 3))], [np.array([0.2])])
    s = rng.standard_normal((10, 3))
    a_star = 0.4
    grads, _ = actor_gradient(actor, spec, QuadraticCritic(a_star), s)
    a = s @ actor.weights[0][0] + 0.2
    # d/dw of -mean(-(a - a*)^2) = mean(2 (a - a*) s)
    gw = np.mean(2 * (a - a_star)[:, None] * s, axis=0)
    gb = np.mean(2 * (a - a_star))
    assert np.max(np.abs(grads.weights[0][0] - gw)) <= 1e-8
    assert abs(grads.biases[0][0] - gb) <= 1e-8


def test_actor_gradient_zero_for_constant_critic():
    spec = MlpSpec(6, 1, (8,))
    actor = init_params(spec, np.random.default_rng(0))
    grads, obj = actor_gradient(actor, spec, ConstantCritic(), np.ones((4, 6)))
    assert not np.any(param_vector(grads))
    assert obj == 3.0


def test_mlp_critic_grad_a_matches_finite_difference():
    spec = MlpSpec(3, 1, (5,), "tanh", "identity")
    c = MlpCritic(init_params(spec, np.random.default_rng(2)), spec)
    s = np.random.default_rng(3).standard_normal((4, 2))
    a = np.array([0.1, -0.3, 0.5, 0.9])
    h = 1e-6
    fd = (c.q(s, a + h) - c.q(s, a - h)) / (2 * h)
    np.testing.assert_allclose(c.grad_a(s, a), fd, rtol=1e-6, atol=1e-9)


def test_actor_update_moves_targets_toward_online():
    ag = agent_for(seed=5, polyak=0.5)
    rng = np.random.default_rng(0)
    for p in (ag.q1, ag.q2, ag.actor):  # separate online from target first
        for arr in p.arrays():
            arr += 0.1 * rng.standard_normal(arr.shape)
    before = [np.linalg.norm(param_vector(t) - param_vector(o))
              for t, o in ((ag.actor_t, ag.actor), (ag.q1_t, ag.q1), (ag.q2_t, ag.q2))]
    s = rng.standard_normal((16, 6))
    td3_actor_update(None, ag, (s,))
    after = [np.linalg.norm(param_vector(t) - param_vector(o))
             for t, o in ((ag.actor_t, ag.actor), (ag.q1_t, ag.q1), (ag.q2_t, ag.q2))]
    assert all(a < b for a, b in zip(after, before))


# -- environment ---------------------------------------------------------------------

def test_env_reset_deterministic():
    gen = ProblemSampler(("random",), (10, 20))
    e1, o1 = env_reset(gen, 4)
    e2, o2 = env_reset(gen, 4)
    assert e1.problem.name == e2.problem.name
    assert np.array_equal(o1, o2)


def test_env_vector_observation_count():
    prob = generate(GeneratorSpec("eq", 13, 0))
    assert prob.m == 7
    env = QpEnv(prob, "vector")
    assert env.observe().shape == (7, 6)


def test_env_initial_rho():
    prob = generate(GeneratorSpec("eq", 13, 0))
    env = QpEnv(prob, "scalar")
    s = SolverSettings()
    assert np.array_equal(env.state.rho, rho_from_scalar(s.rho_bar_init, prob.l, prob.u))


def test_env_first_observation_matches_solver_first_decision():
    prob = generate(GeneratorSpec("random", 20, 2))
    env = QpEnv(prob, "vector")
    seen = []

    class Spy(VectorNetPolicy):
        def decide(self, state, problem):
            from rlqp.policy import featurize_vector, normalize_vector_features
            seen.append(normalize_vector_features(featurize_vector(state, problem)))
            return super().decide(state, problem)

    spec = MlpSpec(6, 1, (4,))
    solve(prob, SolverSettings(), Spy(init_params(spec, np.random.default_rng(0)), spec))
    assert np.array_equal(seen[0], env.observe())


def test_env_at_solution_solves_in_one_step():
    prob = generate(GeneratorSpec("random", 20, 6))
    ref = solve(prob, SolverSettings(eps_abs=1e-10, eps_rel=1e-10, adapt_interval=25))
    env = QpEnv(prob, "scalar", warm_start=(ref.x, ref.y), warmup=False)
    _, r, done = env_step(env, np.array([0.0]))
    assert done and r == 0.0
    assert env.status is Status.SOLVED


def test_env_step_limit_one():
    prob = generate(GeneratorSpec("random", 40, 1))
    env = QpEnv(prob, "vector", inner_iters=25, step_limit=1)
    assert not env.done
    _, r, done = env.step(np.full(prob.m, -1.0))
    assert done and r == -1.0
    with pytest.raises(RuntimeError):
        env.step(np.zeros(prob.m))


def test_env_rejects_wrong_action_count():
    prob = generate(GeneratorSpec("random", 20, 1))
    env = QpEnv(prob, "vector")
    with pytest.raises(ValueError):
        env.step(np.zeros(prob.m + 1))


def test_episode_return_counts_unsolved_steps():
    prob = generate(GeneratorSpec("random", 30, 8))
    env = QpEnv(prob, "scalar", inner_iters=25, step_limit=200)
    ret, steps = 0.0, 0
    while not env.done:
        _, r, _ = env.step(np.array([-1.0 / 6.0]))
        ret += r
        steps += 1
    assert env.status is Status.SOLVED
    assert ret == -(steps - 1)


# -- training ----------------------------------------------------------------------------

def test_vector_buffer_fill_is_steps_times_rows():
    prob = generate(GeneratorSpec("random", 30, 1))
    cfg = tiny_config(steps_per_epoch=6, initial_random_steps=100, test_episodes=0,
                      step_limit=50, inner_iters=25)
    res = train("vector", lambda i: prob, cfg, epochs=1, seed=0)
    assert len(res.buffer) == 6 * prob.m


def test_train_smoke_scalar_and_log(tmp_path):
    gen = ProblemSampler(("random",), (10, 20))
    log = tmp_path / "log.jsonl"
    out = tmp_path / "w.bin"
    res = train("scalar", gen, tiny_config(), epochs=2, seed=1, log_path=log, weights_path=out)
    lines = [json.loads(x) for x in log.read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [1, 2]
    for rec in lines:
        assert set(rec) == {"epoch", "pi_loss", "q_loss", "avg_q", "train_ep_len_avg",
                            "train_ep_len_max", "train_ep_len_std", "test_ep_len_avg"}
    assert out.exists()
    assert res.policy.spec.input_width == 2


def test_train_is_deterministic():
    gen = ProblemSampler(("random",), (10, 15))
    a = train("vector", gen, tiny_config(), epochs=1, seed=3)
    b = train("vector", gen, tiny_config(), epochs=1, seed=3)
    assert np.array_equal(param_vector(a.agent.actor), param_vector(b.agent.actor))
    assert a.log == b.log


def test_train_rejects_unknown_mode():
    with pytest.raises(ValueError):
        train("matrix", lambda i: None, tiny_config(), 1)


def test_presets():
    paper = preset("paper")
    assert (paper.batch_size, paper.polyak, paper.exploration_noise_sigma) == (5000, 0.995, 1.0)
    assert preset("desk", lr=5e-4).lr == 5e-4
    with pytest.raises(ValueError):
        Td3Config(gamma=1.0)

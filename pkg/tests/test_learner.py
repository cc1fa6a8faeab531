"""Q-learner: reward assembly, action selection, TD targets, gradients, buffer."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from coexctl.learner import (
    Adam,
    LearnerConfig,
    MLP,
    QLearner,
    ReplayBuffer,
    Transition,
    assemble_reward,
    epsilon_at,
    load_policy,
    save_policy,
    select_action,
    td_targets,
)


def tiny_config(**kw):
    base = dict(hidden_layers=(8,), batch_size=4, buffer_capacity=64,
                learning_rate=1e-2, target_sync_interval=1000, total_episodes=10)
    base.update(kw)
    return LearnerConfig(**base)


# ----------------------------------------------------------------------
# assemble_reward


def test_assemble_reward_examples():
    assert assemble_reward(0.9, 2.0, -0.3) == pytest.approx(0.3, abs=1e-12)
    assert assemble_reward(0.7, 0.0, -0.5) == 0.7
    assert assemble_reward(0.7, 3.0, 0.0) == 0.7


def test_assemble_reward_strictly_decreasing_in_lambda():
    rewards = [assemble_reward(0.5, lam, -0.2) for lam in np.linspace(0, 5, 20)]
    assert all(a > b for a, b in zip(rewards, rewards[1:]))


# ----------------------------------------------------------------------
# select_action


def test_select_action_greedy_argmax_lowest_index_tie():
    rng = np.random.default_rng(0)
    assert select_action(np.array([0.1, 0.7, 0.7]), 0.0, rng) == 1


def test_select_action_uniform_at_epsilon_one():
    rng = np.random.default_rng(1)
    q = np.zeros(7)
    draws = [select_action(q, 1.0, rng) for _ in range(70_000)]
    counts = np.bincount(draws, minlength=7)
    _, p = stats.chisquare(counts)
    assert p > 0.01


def test_select_action_shift_invariant():
    rng = np.random.default_rng(2)
    q = np.array([0.3, -0.1, 0.9, 0.9])
    assert select_action(q, 0.0, rng) == select_action(q + 123.4, 0.0, rng) == 2


def test_select_action_validates():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        select_action(np.array([]), 0.0, rng)
    with pytest.raises(ValueError):
        select_action(np.array([1.0]), 1.5, rng)


def test_epsilon_schedule_monotone_within_bounds():
    values = [epsilon_at(s, 1000) for s in range(0, 1001, 10)]
    assert values[0] == 1.0
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert all(0.01 <= v <= 1.0 for v in values)
    assert values[-1] == pytest.approx(0.01)
    # holds at the floor after the anneal fraction
    assert epsilon_at(500, 1000) == pytest.approx(0.01)
    assert epsilon_at(900, 1000) == pytest.approx(0.01)


# ----------------------------------------------------------------------
# td_targets


def test_td_targets_terminal_is_reward():
    q = lambda obs: np.zeros((len(obs), 2)) + 99.0
    y = td_targets(np.array([0.5]), np.zeros((1, 3)), np.array([True]), q, 0.99)
    assert y[0] == 0.5


def test_td_targets_gamma_zero_is_reward():
    q = lambda obs: np.ones((len(obs), 2)) * 7.0
    y = td_targets(np.array([0.3, -0.2]), np.zeros((2, 3)), np.array([False, False]), q, 0.0)
    assert np.allclose(y, [0.3, -0.2])


def test_td_targets_match_bellman_oracle_on_two_state_chain():
    # states s0, s1; two actions. Q_target is a fixed table; transitions are
    # hand-built and the expected targets hand-computed.
    q_table = {(0,): np.array([1.0, 2.0]), (1,): np.array([-0.5, 0.25])}

    def q_fn(obs):
        return np.stack([q_table[(int(o[0]),)] for o in obs])

    obs = np.array([[0.0], [1.0], [0.0], [1.0]])
    next_obs = np.array([[1.0], [0.0], [0.0], [1.0]])
    rewards = np.array([1.0, 0.5, -1.0, 2.0])
    terminals = np.array([False, False, True, False])
    gamma = 0.9
    expected = np.array([
        1.0 + 0.9 * 0.25,   # -> s1, max(-0.5, 0.25)
        0.5 + 0.9 * 2.0,    # -> s0, max(1, 2)
        -1.0,               # terminal
        2.0 + 0.9 * 0.25,
    ])
    y = td_targets(rewards, next_obs, terminals, q_fn, gamma)
    assert np.allclose(y, expected, atol=1e-9)


# ----------------------------------------------------------------------
# replay buffer


def test_buffer_fifo_eviction():
    buf = ReplayBuffer(capacity=5, obs_dim=2)
    for i in range(8):
        buf.push(Transition(np.zeros(2), 0, float(i), np.zeros(2), False))
    assert len(buf) == 5
    assert sorted(buf.rewards.tolist()) == [3.0, 4.0, 5.0, 6.0, 7.0]


@given(st.integers(min_value=1, max_value=20), st.integers(min_value=0, max_value=60))
@settings(max_examples=100, deadline=None)
def test_buffer_size_never_exceeds_capacity(capacity, pushes):
    buf = ReplayBuffer(capacity=capacity, obs_dim=1)
    for i in range(pushes):
        buf.push(Transition(np.zeros(1), 0, float(i), np.zeros(1), False))
    assert len(buf) == min(capacity, pushes)
    if pushes > capacity:
        kept = set(buf.rewards.tolist())
        assert kept == {float(i) for i in range(pushes - capacity, pushes)}


# ----------------------------------------------------------------------
# networks and training


def test_network_output_dim_matches_actions():
    lrn = QLearner(obs_dim=6, n_actions=11, config=tiny_config(), seed=0)
    for _ in range(5):
        x = np.random.default_rng(0).normal(size=6)
        assert lrn.q_values(x).shape == (11,)


def test_target_initialized_as_copy_and_sync_idempotent():
    lrn = QLearner(obs_dim=4, n_actions=3, config=tiny_config(), seed=1)
    probe = np.random.default_rng(2).normal(size=(5, 4))
    assert np.allclose(lrn.online.forward(probe), lrn.target.forward(probe))
    lrn.optimizer.step(
        lrn.online.parameters(), [np.ones_like(p) for p in lrn.online.parameters()]
    )
    assert not np.allclose(lrn.online.forward(probe), lrn.target.forward(probe))
    lrn.sync_target()
    a = lrn.target.forward(probe).copy()
    lrn.sync_target()
    assert np.array_equal(a, lrn.target.forward(probe))
    assert np.allclose(lrn.online.forward(probe), lrn.target.forward(probe))


def test_train_step_noop_until_batch_available():
    lrn = QLearner(obs_dim=3, n_actions=2, config=tiny_config(batch_size=8), seed=0)
    for i in range(7):
        lrn.buffer.push(Transition(np.zeros(3), 0, 1.0, np.zeros(3), True))
        assert lrn.train_step() is None
    lrn.buffer.push(Transition(np.zeros(3), 0, 1.0, np.zeros(3), True))
    assert lrn.train_step() is not None


def test_loss_nonnegative():
    lrn = QLearner(obs_dim=3, n_actions=4, config=tiny_config(), seed=3)
    rng = np.random.default_rng(4)
    for _ in range(20):
        lrn.buffer.push(Transition(rng.normal(size=3), int(rng.integers(4)),
                                   float(rng.normal()), rng.normal(size=3),
                                   bool(rng.integers(2))))
    for _ in range(50):
        assert lrn.train_step() >= 0.0


def test_fixed_transition_td_error_converges():
    lrn = QLearner(obs_dim=2, n_actions=2,
                   config=tiny_config(batch_size=4, learning_rate=5e-2), seed=5)
    obs = np.array([1.0, -1.0])
    for _ in range(8):
        lrn.buffer.push(Transition(obs, 1, 0.5, np.zeros(2), True))
    for _ in range(500):
        lrn.train_step()
    assert abs(lrn.q_values(obs)[1] - 0.5) < 1e-3


def test_loss_gradient_matches_central_finite_differences():
    rng = np.random.default_rng(6)
    net = MLP([3, 5, 2], rng)
    obs = rng.normal(size=(4, 3))
    actions = np.array([0, 1, 1, 0])
    targets = rng.normal(size=4)

    def loss_value():
        q = net.forward(obs)
        err = q[np.arange(4), actions] - targets
        return float(np.mean(err**2))

    q_all, acts = net.forward_cached(obs)
    err = q_all[np.arange(4), actions] - targets
    dout = np.zeros_like(q_all)
    dout[np.arange(4), actions] = 2.0 * err / 4
    grads_w, grads_b = net.backward(acts, dout)
    analytic = grads_w + grads_b

    h = 1e-6
    for p_idx, param in enumerate(net.weights + net.biases):
        flat = param.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = loss_value()
            flat[k] = orig - h
            down = loss_value()
            flat[k] = orig
            numeric = (up - down) / (2 * h)
            ana = analytic[p_idx].reshape(-1)[k]
            denom = max(abs(numeric), abs(ana), 1e-8)
            assert abs(numeric - ana) / denom <= 1e-4


def test_adam_moves_against_gradient():
    p = [np.array([1.0, -2.0])]
    opt = Adam(p, lr=0.1)
    for _ in range(50):
        opt.step(p, [np.array([1.0, -1.0])])
    assert p[0][0] < 1.0 and p[0][1] > -2.0


# ----------------------------------------------------------------------
# policy artifact


def test_policy_artifact_roundtrip(tmp_path):
    lrn = QLearner(obs_dim=5, n_actions=6, config=tiny_config(), seed=7)
    path = tmp_path / "policy.bin"
    save_policy(str(path), lrn, meta={"action_mode": "cw"})
    art = load_policy(str(path))
    assert art.obs_dim == 5 and art.n_actions == 6
    assert art.meta["action_mode"] == "cw"
    probe = np.random.default_rng(8).normal(size=(3, 5))
    assert np.array_equal(art.network().forward(probe), lrn.online.forward(probe))


def test_training_with_lambda_max_zero_is_unconstrained():
    from coexctl.constraint import DualController
    from coexctl.env import CoexEnv, coex_mix_preset
    from coexctl.learner import run_training

    env = CoexEnv(coex_mix_preset(), action_mode="cw")
    dual = DualController(lambda_max=0.0)
    res = run_training(env, dual, tiny_config(hidden_layers=(16,), batch_size=16),
                       seed=2, scaling=True, episodes=2)
    assert all(row.lam == 0.0 for row in res.log)
    assert all(row.reward == row.jfi for row in res.log)


def test_policy_artifact_checksum_detects_corruption(tmp_path):
    lrn = QLearner(obs_dim=3, n_actions=2, config=tiny_config(), seed=9)
    path = tmp_path / "policy.bin"
    save_policy(str(path), lrn, meta={})
    blob = bytearray(path.read_bytes())
    blob[-1] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="checksum"):
        load_policy(str(path))

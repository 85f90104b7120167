import itertools

import numpy as np
import pytest
from scipy import stats

from conftest import light_scenario
from dvsl import neural as nn
from dvsl.baselines import (N_STATES, DQNAgent, DQNConfig, QLearningAgent, QLearningConfig, broadcast,
                            config_from_dict, discretize_state, epsilon_greedy, load_q_table,
                            no_control_action, no_control_policy, q_learning_step, save_q_table,
                            train_dqn, train_q_learning)
from dvsl.ddpg import Batch
from dvsl.env import VSLEnv
from dvsl.errors import ConfigError, CorruptFileError, ShapeError


def occupancy(upstream, merge, ramp):
    return np.r_[np.full(5, merge), np.full(5, upstream), ramp]


# ---------------------------------------------------------------------- no control
def test_no_control_is_constant():
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = rng.random(11)
        assert no_control_policy(s).tolist() == [29.185] * 5
        assert no_control_action(s).tolist() == [3] * 5


# ---------------------------------------------------------------------- discretisation
def test_discretize_corners():
    assert discretize_state(np.zeros(11)) == 0
    assert discretize_state(np.ones(11)) == 124
    assert discretize_state(occupancy(0.12, 0.34, 0.05)) == 40


def test_discretize_edges_go_up():
    assert discretize_state(occupancy(0.0, 0.0, 0.1)) == 1
    assert discretize_state(occupancy(0.0, 0.0, 0.0999)) == 0
    assert discretize_state(occupancy(0.5, 0.0, 0.0)) == 100


def test_discretize_is_onto():
    reps = [0.05, 0.15, 0.25, 0.4, 0.8]
    seen = {discretize_state(occupancy(u, m, r)) for u, m, r in itertools.product(reps, repeat=3)}
    assert seen == set(range(N_STATES))


def test_discretize_shape_check():
    with pytest.raises(ShapeError):
        discretize_state(np.zeros(10))


# ---------------------------------------------------------------------- Q-learning
def test_zero_learning_rate_leaves_table():
    t = np.random.default_rng(0).random((N_STATES, 6))
    before = t.copy()
    q_learning_step(t, 3, 2, 5.0, 7, alpha=0.0, gamma=0.9)
    assert np.array_equal(t, before)


def test_single_update_from_zero_table():
    t = np.zeros((N_STATES, 6))
    q_learning_step(t, 10, 4, 10.0, 11, alpha=0.1, gamma=0.99)
    assert t[10, 4] == 1.0
    assert np.count_nonzero(t) == 1


def test_two_state_chain_converges_to_fixed_point():
    # state 0 --(r=1)--> state 1 --(r=0)--> state 1, one action
    t = np.zeros((2, 1))
    for _ in range(3000):
        q_learning_step(t, 0, 0, 1.0, 1, 0.5, 0.9)
        q_learning_step(t, 1, 0, 0.0, 1, 0.5, 0.9)
    assert t[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert t[1, 0] == pytest.approx(0.0, abs=1e-12)
    t = np.zeros((1, 1))
    for _ in range(5000):
        q_learning_step(t, 0, 0, 1.0, 0, 0.5, 0.9)
    assert t[0, 0] == pytest.approx(10.0, rel=1e-9)


def test_observe_touches_one_cell():
    agent = QLearningAgent()
    agent.observe(occupancy(0.12, 0.34, 0.05), broadcast(2), 3.0, np.zeros(11))
    assert np.count_nonzero(agent.table) == 1 and agent.table[40, 2] == pytest.approx(0.3)


def test_greedy_epsilon_and_broadcast():
    rng = np.random.default_rng(0)
    vals = np.array([0.0, 1.0, 5.0, 2.0, 0.0, 0.0])
    assert all(epsilon_greedy(vals, 0.0, rng) == 2 for _ in range(100))
    agent = QLearningAgent()
    agent.table[0] = vals
    a = agent.greedy_action(np.zeros(11))
    assert a.tolist() == [2] * 5


def test_epsilon_decays_per_episode():
    agent = QLearningAgent(QLearningConfig(epsilon=0.1, epsilon_decay=0.5, epsilon_min=0.02))
    agent.end_episode()
    assert agent.epsilon == 0.05
    agent.end_episode()
    agent.end_episode()
    assert agent.epsilon == 0.02


def test_q_table_round_trip_and_errors(tmp_path):
    t = np.random.default_rng(1).standard_normal((N_STATES, 6))
    back = load_q_table(save_q_table(t, tmp_path / "q.csv"))
    assert np.array_equal(back, t)
    lines = (tmp_path / "q.csv").read_text().splitlines()
    (tmp_path / "short.csv").write_text("\n".join(lines[:50]))
    with pytest.raises(ShapeError):
        load_q_table(tmp_path / "short.csv")
    (tmp_path / "bad.csv").write_text("\n".join(lines[:5] + ["5,x,1,1,1,1,1"] + lines[6:]))
    with pytest.raises(CorruptFileError):
        load_q_table(tmp_path / "bad.csv")
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(CorruptFileError):
        load_q_table(tmp_path / "empty.csv")


def test_qlearning_training_runs(tmp_path):
    env = VSLEnv(light_scenario(hours=1, seed=0))
    res = train_q_learning(env, QLearningConfig(episodes=2, seed=1), checkpoint_dir=tmp_path)
    assert len(res.log) == 120 and not res.aborted
    assert np.count_nonzero(res.agent.table) > 0
    assert np.array_equal(QLearningAgent().load(tmp_path).table, res.agent.table)


# ---------------------------------------------------------------------- DQN
def test_dqn_zero_discount_targets(rng):
    agent = DQNAgent(DQNConfig(gamma=0.0))
    r = rng.standard_normal(8)
    b = Batch(np.zeros(8, dtype=int), rng.random((8, 11)), np.zeros((8, 5)), r, rng.random((8, 11)), np.arange(8))
    assert np.array_equal(agent.targets(b), r)


def test_dqn_loss_gradient_matches_finite_differences(rng):
    agent = DQNAgent(DQNConfig(hidden=6, gamma=0.5, seed=2))
    s, s2 = rng.random((4, 11)), rng.random((4, 11))
    acts = np.repeat(rng.integers(0, 6, 4)[:, None], 5, axis=1).astype(float)
    b = Batch(np.zeros(4, dtype=int), s, acts, rng.standard_normal(4), s2, np.arange(4))
    y = agent.targets(b)
    a = acts[:, 0].astype(int)

    def loss():
        q = nn.predict(agent.net, s)
        return float(np.mean((q[np.arange(4), a] - y) ** 2))

    # capture the gradient the update would apply, without stepping
    captured = {}
    agent.opt.step = lambda params, grads: captured.setdefault("g", grads) and True
    agent.dqn_update(b)
    h = 1e-6
    for p, g in zip(agent.net.arrays(), captured["g"].arrays()):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = loss()
            flat[k] = old - h
            down = loss()
            flat[k] = old
            assert (up - down) / (2 * h) == pytest.approx(gflat[k], rel=1e-4, abs=1e-9)


def test_full_exploration_is_uniform():
    agent = DQNAgent(DQNConfig(epsilon_start=1.0, epsilon_end=1.0, seed=3))
    s = np.full(11, 0.2)
    draws = [agent.select_action(s, explore=True)[0] for _ in range(100_000)]
    counts = np.bincount(draws, minlength=6)
    assert stats.chisquare(counts).pvalue > 0.01


def test_dqn_actions_are_broadcast(rng):
    agent = DQNAgent(DQNConfig(seed=4))
    for _ in range(50):
        a = agent.select_action(rng.random(11), explore=True)
        assert len(set(a.tolist())) == 1 and 0 <= a[0] <= 5


def test_dqn_epsilon_schedule():
    agent = DQNAgent(DQNConfig(epsilon_start=1.0, epsilon_end=0.05, epsilon_decay=0.5))
    assert agent.epsilon == 1.0
    agent.select_action(np.zeros(11), explore=True)
    assert agent.epsilon == 0.5
    agent.select_action(np.zeros(11), explore=False)
    assert agent.epsilon == 0.5
    agent.n_explore = 100
    assert agent.epsilon == 0.05


def test_dqn_training_and_checkpoint(tmp_path):
    env = VSLEnv(light_scenario(hours=1, seed=0))
    res = train_dqn(env, DQNConfig(episodes=1, batch_size=8, seed=5), checkpoint_dir=tmp_path)
    assert len(res.log) == 60
    loaded = DQNAgent(DQNConfig(seed=99)).load(tmp_path)
    assert loaded.net.equals(res.agent.net)


def test_config_errors():
    with pytest.raises(ConfigError):
        QLearningConfig(alpha=1.5)
    with pytest.raises(ConfigError):
        DQNConfig(epsilon_start=0.01, epsilon_end=0.05)
    with pytest.raises(ConfigError):
        config_from_dict(DQNConfig, {"learning_rate": 0.1})
    assert config_from_dict(QLearningConfig, {"alpha": 0.2}).alpha == 0.2

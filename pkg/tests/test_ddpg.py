import csv

import numpy as np
import pytest
from scipy import stats

from conftest import light_scenario, quiet_scenario
from dvsl import neural as nn
from dvsl.ddpg import (AgentConfig, Batch, DDPGAgent, LaplaceNoise, ReplayMemory, episode_seeds,
                       laplace_sample, sample_minibatch, train)
from dvsl.env import VSLEnv, map_action_g
from dvsl.errors import ConfigError


def fill(mem, n, start=0):
    for k in range(start, start + n):
        mem.add(k, np.full(11, k, dtype=float), np.zeros(5), float(k), np.zeros(11))


def batch_of(s, a, r, s2):
    s, a, s2 = np.atleast_2d(s), np.atleast_2d(a), np.atleast_2d(s2)
    return Batch(np.zeros(len(s), dtype=int), s, a.astype(float), np.atleast_1d(r).astype(float), s2,
                 np.arange(len(s)))


# ---------------------------------------------------------------------- noise
def test_laplace_moments():
    x = laplace_sample(2.5, np.random.default_rng(0), 1_000_000)
    assert abs(x.var() - 12.5) <= 0.02 * 12.5
    assert abs(np.median(x)) <= 0.01


def test_laplace_vanishes_with_scale():
    x = laplace_sample(1e-12, np.random.default_rng(0), 1000)
    assert np.max(np.abs(x)) < 1e-9


def test_noise_decay_exact():
    noise = LaplaceNoise()
    for n in range(1, 3001):
        noise.advance()
        if n in (1, 10, 1000, 3000):
            assert noise.b == 2.5 * 0.999 ** n


def test_select_action_decays_only_when_exploring():
    agent = DDPGAgent(AgentConfig(seed=1))
    s = np.full(11, 0.2)
    a1 = agent.select_action(s, explore=False)
    a2 = agent.select_action(s, explore=False)
    assert np.array_equal(a1[1], a2[1]) and agent.noise.n == 0
    agent.select_action(s, explore=True)
    assert agent.noise.n == 1 and agent.noise.b == 2.5 * 0.999


def test_tiny_noise_explore_equals_greedy():
    agent = DDPGAgent(AgentConfig(noise_b0=1e-12, seed=3))
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = rng.random(11)
        assert np.array_equal(agent.select_action(s, True)[1], agent.select_action(s, False)[1])


def test_exploration_covers_most_limits():
    agent = DDPGAgent(AgentConfig(noise_decay=1.0, seed=2))
    s = np.full(11, 0.3)
    acts = np.array([agent.select_action(s, explore=True)[1] for _ in range(10_000)])
    for lane in range(5):
        assert len(np.unique(acts[:, lane])) >= 4


# ---------------------------------------------------------------------- replay
def test_single_entry_always_sampled():
    mem = ReplayMemory(10)
    fill(mem, 1)
    b = sample_minibatch(mem, 1, np.random.default_rng(0))
    assert b.r.tolist() == [0.0]
    b = mem.sample(1, np.random.default_rng(1))
    assert b.r.tolist() == [0.0]


def test_rank_probabilities_size_three():
    mem = ReplayMemory(10)
    fill(mem, 3)
    assert np.allclose(mem.probabilities(), [6 / 11, 3 / 11, 2 / 11], rtol=1e-15)
    # newest insertion (reward 2) is rank 1
    assert mem.r[mem.index_of_rank(1)] == 2.0


def test_rank_sampling_fits_reciprocal_rank():
    mem = ReplayMemory(500)
    fill(mem, 100)
    ranks = mem.sample_ranks(1_000_000, np.random.default_rng(0))
    counts = np.bincount(ranks, minlength=101)[1:]
    expected = mem.probabilities() * len(ranks)
    assert stats.chisquare(counts, expected).pvalue > 0.01


def test_insufficient_entries_signal_skip():
    mem = ReplayMemory(100)
    fill(mem, 5)
    assert mem.sample(64, np.random.default_rng(0)) is None


def test_eviction_keeps_newest():
    mem = ReplayMemory(50)
    fill(mem, 50 + 17)
    assert len(mem) == 50
    kept = set(mem.r.astype(int).tolist())
    assert kept == set(range(17, 67))
    assert sorted(mem.ranks().tolist()) == list(range(1, 51))
    # rank 1 is the latest insertion, rank 50 the oldest survivor
    assert mem.r[mem.index_of_rank(1)] == 66 and mem.r[mem.index_of_rank(50)] == 17


# ---------------------------------------------------------------------- critic
def one_unit_agent(gamma=0.99):
    """Agent whose networks have a single hidden unit with hand-set weights."""
    agent = DDPGAgent(AgentConfig(gamma=gamma, hidden=1, seed=0))
    agent.actor = nn.MLPParams([nn.Layer(np.full((1, 11), 0.1), np.array([0.2]), "relu"),
                                nn.Layer(np.linspace(-1, 1, 5)[:, None], np.zeros(5), "sigmoid")], 6.0)
    critic = nn.MLPParams([nn.Layer(np.r_[np.full(11, 0.5), np.full(5, -0.1)][None, :], np.array([0.3]), "relu"),
                           nn.Layer(np.array([[2.0]]), np.array([-1.0]), "identity")])
    agent.critic = critic
    agent.actor_target, agent.critic_target = agent.actor.copy(), agent.critic.copy()
    agent.actor_opt, agent.critic_opt = nn.Adam(agent.actor, 1e-4), nn.Adam(agent.critic, 1e-3)
    return agent


def test_critic_loss_hand_computed():
    agent = one_unit_agent(gamma=0.9)
    s = np.full(11, 0.2)
    s2 = np.full(11, 0.4)
    a = np.array([1, 2, 3, 4, 5])
    r = 1.5
    # target actor at s2: hidden relu(0.1*0.4*11 + 0.2) = 0.64
    h = 0.64
    a2 = [int(min(np.floor(6 / (1 + np.exp(-w * h))), 5)) for w in np.linspace(-1, 1, 5)]
    q2 = 2.0 * max(0.5 * 0.4 * 11 - 0.1 * sum(a2) + 0.3, 0) - 1.0
    q = 2.0 * max(0.5 * 0.2 * 11 - 0.1 * sum(a) + 0.3, 0) - 1.0
    expected = (r + 0.9 * q2 - q) ** 2
    loss = agent.critic_update(batch_of(s, a, r, s2))
    assert loss == pytest.approx(expected, rel=1e-12)


def test_zero_discount_targets_are_rewards(rng):
    agent = DDPGAgent(AgentConfig(gamma=0.0, seed=4))
    b = batch_of(rng.random((8, 11)), rng.integers(0, 6, (8, 5)), rng.standard_normal(8), rng.random((8, 11)))
    assert np.array_equal(agent.critic_targets(b), b.r)


def test_strict_target_mode_drops_discount(rng):
    agent = DDPGAgent(AgentConfig(gamma=0.5, discount_target=False, seed=4))
    b = batch_of(rng.random((4, 11)), rng.integers(0, 6, (4, 5)), np.zeros(4), rng.random((4, 11)))
    a2 = map_action_g(nn.actor_forward(agent.actor_target, b.s2)).astype(float)
    assert np.allclose(agent.critic_targets(b), nn.critic_forward(agent.critic_target, b.s2, a2))


def test_critic_at_target_takes_zero_step(rng):
    agent = DDPGAgent(AgentConfig(gamma=0.0, seed=5))
    agent.critic = nn.zeros_like(agent.critic)
    agent.critic_opt = nn.Adam(agent.critic, 1e-3)
    before = agent.critic.copy()
    b = batch_of(rng.random((4, 11)), rng.integers(0, 6, (4, 5)), np.zeros(4), rng.random((4, 11)))
    assert agent.critic_update(b) == 0.0
    assert agent.critic.equals(before)


def test_non_finite_targets_are_quarantined(rng):
    agent = DDPGAgent(AgentConfig(seed=6))
    r = np.array([0.0, np.nan, 1.0, np.inf])
    b = batch_of(rng.random((4, 11)), rng.integers(0, 6, (4, 5)), r, rng.random((4, 11)))
    loss = agent.critic_update(b)
    assert np.isfinite(loss) and agent.quarantined == 2


# ---------------------------------------------------------------------- actor
def test_actor_gradient_zero_when_critic_ignores_action(rng):
    agent = DDPGAgent(AgentConfig(seed=7))
    agent.critic.layers[0].W[:, 11:] = 0.0
    grads, _ = agent.actor_gradients(rng.random((6, 11)))
    assert all(np.all(g == 0) for g in grads.arrays())


def sum_critic():
    """Critic computing Q = sum(a) for positive actions."""
    W1 = np.zeros((5, 16))
    W1[:, 11:] = np.eye(5)
    return nn.MLPParams([nn.Layer(W1, np.zeros(5), "relu"), nn.Layer(np.ones((1, 5)), np.zeros(1), "identity")])


def test_actor_gradient_with_sum_critic_matches_finite_differences(rng):
    agent = DDPGAgent(AgentConfig(hidden=7, seed=8))
    agent.critic = sum_critic()
    s = rng.random((5, 11))
    grads, _ = agent.actor_gradients(s)

    def objective():
        return -float(np.mean(nn.actor_forward(agent.actor, s).sum(axis=1)))

    h = 1e-6
    for p, g in zip(agent.actor.arrays(), grads.arrays()):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = objective()
            flat[k] = old - h
            down = objective()
            flat[k] = old
            assert (up - down) / (2 * h) == pytest.approx(gflat[k], rel=1e-4, abs=1e-9)


def test_small_actor_step_raises_mean_q(rng):
    agent = DDPGAgent(AgentConfig(actor_lr=1e-5, seed=9))
    s = rng.random((32, 11))
    b = batch_of(s, np.zeros((32, 5)), np.zeros(32), s)
    q0 = agent.actor_update(b)
    q1 = float(np.mean(nn.critic_forward(agent.critic, s, nn.actor_forward(agent.actor, s))))
    assert q1 > q0


def test_actor_step_follows_action_gradient_sign():
    agent = DDPGAgent(AgentConfig(hidden=1, actor_lr=1e-4, seed=0))
    agent.actor = nn.MLPParams([nn.Layer(np.full((1, 11), 0.1), np.array([0.45]), "relu"),
                                nn.Layer(np.full((5, 1), 0.01), np.zeros(5), "sigmoid")], 6.0)
    agent.actor_opt = nn.Adam(agent.actor, 1e-4)
    c = np.array([1.0, -2.0, 0.5, -0.3, 3.0])
    agent.critic = nn.MLPParams([nn.Layer(np.r_[np.zeros(11), c][None, :], np.array([100.0]), "relu"),
                                 nn.Layer(np.ones((1, 1)), np.zeros(1), "identity")])
    s = np.full((1, 11), 0.5)
    before = nn.actor_forward(agent.actor, s)[0]
    agent.actor_update(batch_of(s, np.zeros(5), 0.0, s))
    after = nn.actor_forward(agent.actor, s)[0]
    assert np.array_equal(np.sign(after - before), np.sign(c))


def test_targets_lag_online(rng):
    agent = DDPGAgent(AgentConfig(batch_size=4, seed=10))
    fill(agent.memory, 20)
    for _ in range(10):
        agent.learn()
    assert not agent.actor_target.equals(agent.actor)
    assert not agent.critic_target.equals(agent.critic)


def test_greedy_policy_is_a_function_of_state(rng):
    agent = DDPGAgent(AgentConfig(seed=11))
    states = rng.random((20, 11))
    first = [agent.greedy_action(s) for s in states]
    agent.select_action(states[0], explore=True)
    assert all(np.array_equal(a, agent.greedy_action(s)) for a, s in zip(first, states))


def test_config_validation():
    with pytest.raises(ConfigError):
        AgentConfig(gamma=1.0)
    with pytest.raises(ConfigError):
        AgentConfig(tau=0.0)
    with pytest.raises(ConfigError):
        AgentConfig(reward_kind="r9")
    with pytest.raises(ConfigError):
        AgentConfig.from_dict({"gama": 0.9})


# ---------------------------------------------------------------------- training loop
def test_zero_episodes():
    res = train(VSLEnv(quiet_scenario()), AgentConfig(episodes=0))
    assert res.log == [] and res.returns == []


def test_training_log_and_checkpoint(tmp_path):
    env = VSLEnv(light_scenario(hours=1, seed=0))
    cfg = AgentConfig(episodes=2, batch_size=16, seed=3)
    res = train(env, cfg, checkpoint_dir=tmp_path / "ckpt")
    assert len(res.log) == 2 * 60
    assert [r[1] for r in res.log[:3]] == [0, 1, 2]
    res.write_log(tmp_path / "log.csv")
    rows = list(csv.reader((tmp_path / "log.csv").open()))
    assert rows[0] == ["episode", "step", "reward_kind", "r", "critic_loss", "mean_q", "b"]
    assert len(rows) == 121
    # noise keeps decaying across episodes
    assert res.log[-1][-1] == 2.5 * 0.999 ** 120
    loaded = DDPGAgent(cfg).load(tmp_path / "ckpt")
    s = np.full(11, 0.1)
    assert np.array_equal(loaded.greedy_action(s), res.agent.greedy_action(s))
    assert loaded.actor.equals(res.agent.actor)


def test_env_fault_aborts_episode_only():
    env = VSLEnv(light_scenario(hours=1, seed=0))
    real_step = env.step
    calls = {"n": 0}

    def flaky(a):
        calls["n"] += 1
        if calls["n"] == 10:
            raise RuntimeError("detector failure")
        return real_step(a)

    env.step = flaky
    res = train(env, AgentConfig(episodes=2, batch_size=8, seed=0))
    assert res.aborted == [0]
    assert len(res.returns) == 2
    assert len(res.log) == 9 + 60


def test_episode_seed_streams_are_disjoint():
    a = episode_seeds(0, 20, 1)
    b = episode_seeds(0, 20, 2)
    assert len(set(a)) == 20 and not set(a) & set(b)
    assert episode_seeds(0, 20, 1) == a

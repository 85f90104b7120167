"""Reference controllers that post one limit on every lane.

* ``no_control_policy``: 65 mph everywhere, always.
* Tabular Q-learning on a 125-state summary of the occupancies (mean
  upstream, mean merge and ramp occupancy, five bins each).
* DQN with an 11-120-6 network, epsilon-greedy behaviour and the same
  recency-ranked replay as the DDPG agent.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import neural as nn
from .ddpg import TRAIN_STREAM, Batch, ReplayMemory, TrainingResult, episode_seeds
from .env import N_ACTIONS, N_LANES, STATE_DIM, VSLEnv, check_reward_kind
from .errors import ConfigError, CorruptFileError, ShapeError
from .sim.scenario import MAIN_DEFAULT_LIMIT

log = logging.getLogger(__name__)

BIN_EDGES = (0.1, 0.2, 0.3, 0.5)
N_BINS = len(BIN_EDGES) + 1
N_STATES = N_BINS ** 3
NO_CONTROL_ACTION = 3


def no_control_policy(s=None) -> np.ndarray:
    """Limits of the uncontrolled road: 29.185 m/s on all five lanes."""
    return np.full(N_LANES, MAIN_DEFAULT_LIMIT)


def no_control_action(s=None) -> np.ndarray:
    return np.full(N_LANES, NO_CONTROL_ACTION, dtype=np.int64)


def broadcast(action: int) -> np.ndarray:
    """The same limit index on every lane."""
    return np.full(N_LANES, int(action), dtype=np.int64)


def discretize_state(s, edges=BIN_EDGES) -> int:
    """Index ``upstream_bin * 25 + merge_bin * 5 + ramp_bin`` of an occupancy vector.

    The vector is ordered merge lanes, upstream lanes, ramp; a value equal to
    an edge falls in the upper bin.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (STATE_DIM,):
        raise ShapeError(f"expected a {STATE_DIM}-vector, got shape {s.shape}")
    merge = s[:N_LANES].mean()
    upstream = s[N_LANES:2 * N_LANES].mean()
    ramp = s[2 * N_LANES]
    b = np.searchsorted(np.asarray(edges), [upstream, merge, ramp], side="right")
    nb = len(edges) + 1
    return int(b[0] * nb * nb + b[1] * nb + b[2])


# ---------------------------------------------------------------------- Q-learning
@dataclass
class QLearningConfig:
    alpha: float = 0.1
    gamma: float = 0.99
    epsilon: float = 0.1
    #: epsilon is multiplied by this after every episode
    epsilon_decay: float = 0.97
    epsilon_min: float = 0.01
    episodes: int = 150
    reward_kind: str = "r1_flow"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if not 0.0 <= self.epsilon_min <= self.epsilon <= 1.0:
            raise ConfigError("need 0 <= epsilon_min <= epsilon <= 1")
        if not 0.0 < self.epsilon_decay <= 1.0:
            raise ConfigError("epsilon_decay must lie in (0, 1]")
        if self.episodes < 0:
            raise ConfigError("episodes must be >= 0")
        check_reward_kind(self.reward_kind)


def q_learning_step(table: np.ndarray, s_idx: int, a: int, r: float, s_next_idx: int,
                    alpha: float, gamma: float) -> np.ndarray:
    """In-place one-step Q-learning update of a single cell; returns the table."""
    target = r + gamma * np.max(table[s_next_idx])
    table[s_idx, a] += alpha * (target - table[s_idx, a])
    return table


def epsilon_greedy(values: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Uniform random action with probability epsilon, else the first maximiser."""
    if rng.random() < epsilon:
        return int(rng.integers(len(values)))
    return int(np.argmax(values))


class QLearningAgent:
    def __init__(self, config: QLearningConfig | None = None):
        self.config = config or QLearningConfig()
        self.table = np.zeros((N_STATES, N_ACTIONS))
        self.epsilon = self.config.epsilon
        self.rng = np.random.default_rng(np.random.SeedSequence([self.config.seed, 7]))

    def select_action(self, s, explore: bool = False) -> np.ndarray:
        q = self.table[discretize_state(s)]
        a = epsilon_greedy(q, self.epsilon, self.rng) if explore else int(np.argmax(q))
        return broadcast(a)

    def greedy_action(self, s) -> np.ndarray:
        return self.select_action(s, explore=False)

    def observe(self, s, a, r, s2) -> None:
        c = self.config
        q_learning_step(self.table, discretize_state(s), int(a[0]), r, discretize_state(s2),
                        c.alpha, c.gamma)

    def end_episode(self) -> None:
        c = self.config
        self.epsilon = max(c.epsilon_min, self.epsilon * c.epsilon_decay)

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_q_table(self.table, d / "q_table.csv")
        return d

    def load(self, directory) -> "QLearningAgent":
        self.table = load_q_table(Path(directory) / "q_table.csv")
        return self


def save_q_table(table: np.ndarray, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["state"] + [f"a{j}" for j in range(table.shape[1])])
        for i, row in enumerate(table):
            w.writerow([i] + [repr(float(v)) for v in row])
    return path


def load_q_table(path) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "state":
        raise CorruptFileError(f"{path}: missing Q-table header")
    body = rows[1:]
    if len(body) != N_STATES or any(len(r) != N_ACTIONS + 1 for r in body):
        raise ShapeError(f"{path}: expected {N_STATES} rows of {N_ACTIONS} values")
    try:
        table = np.array([[float(v) for v in r[1:]] for r in body])
    except ValueError as exc:
        raise CorruptFileError(f"{path}: {exc}") from None
    if not np.all(np.isfinite(table)):
        raise CorruptFileError(f"{path}: non-finite Q values")
    return table


# ---------------------------------------------------------------------- DQN
@dataclass
class DQNConfig:
    gamma: float = 0.99
    tau: float = 0.001
    lr: float = 1e-3
    batch_size: int = 64
    replay_capacity: int = 200_000
    hidden: int = 120
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    #: per exploring step
    epsilon_decay: float = 0.999
    episodes: int = 150
    reward_kind: str = "r1_flow"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("tau must lie in (0, 1]")
        if not 0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0:
            raise ConfigError("need 0 <= epsilon_end <= epsilon_start <= 1")
        if self.batch_size < 1 or self.replay_capacity < 1 or self.hidden < 1 or self.lr <= 0:
            raise ConfigError("batch_size, replay_capacity, hidden and lr must be positive")
        if self.episodes < 0:
            raise ConfigError("episodes must be >= 0")
        check_reward_kind(self.reward_kind)


class DQNAgent:
    def __init__(self, config: DQNConfig | None = None):
        self.config = c = config or DQNConfig()
        init_ss, act_ss, replay_ss = np.random.SeedSequence([c.seed, 11]).spawn(3)
        self.net = nn.dqn_network(np.random.default_rng(init_ss), STATE_DIM, c.hidden, N_ACTIONS)
        self.target = self.net.copy()
        self.opt = nn.Adam(self.net, c.lr)
        self.act_rng = np.random.default_rng(act_ss)
        self.replay_rng = np.random.default_rng(replay_ss)
        self.memory = ReplayMemory(c.replay_capacity, STATE_DIM, N_LANES)
        self.n_explore = 0
        self.quarantined = 0

    @property
    def epsilon(self) -> float:
        c = self.config
        return max(c.epsilon_end, c.epsilon_start * c.epsilon_decay ** self.n_explore)

    def select_action(self, s, explore: bool = False) -> np.ndarray:
        q = nn.predict(self.net, s)
        if explore:
            a = epsilon_greedy(q, self.epsilon, self.act_rng)
            self.n_explore += 1
        else:
            a = int(np.argmax(q))
        return broadcast(a)

    def greedy_action(self, s) -> np.ndarray:
        return self.select_action(s, explore=False)

    def targets(self, batch: Batch) -> np.ndarray:
        q2 = nn.predict(self.target, batch.s2)
        return batch.r + self.config.gamma * q2.max(axis=1)

    def dqn_update(self, batch: Batch) -> float:
        """One step on the squared TD error of the taken actions; returns the loss before it."""
        y = self.targets(batch)
        ok = np.isfinite(y)
        if not np.all(ok):
            self.quarantined += int(np.sum(~ok))
            log.warning("quarantined %d transitions with non-finite targets", int(np.sum(~ok)))
            if not np.any(ok):
                return float("nan")
        q, tr = nn.forward(self.net, batch.s[ok])
        a = batch.a[ok, 0].astype(np.int64)
        rows = np.arange(len(a))
        err = q[rows, a] - y[ok]
        g = np.zeros_like(q)
        g[rows, a] = 2.0 * err / len(err)
        grads, _ = nn.backward(self.net, tr, g)
        self.opt.step(self.net, grads)
        return float(np.mean(err ** 2))

    def learn(self) -> tuple[float, float] | None:
        batch = self.memory.sample(self.config.batch_size, self.replay_rng)
        if batch is None:
            return None
        loss = self.dqn_update(batch)
        nn.soft_update(self.target, self.net, self.config.tau)
        return loss, float(np.mean(nn.predict(self.net, batch.s).max(axis=1)))

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        nn.save_weights(self.net, d / "dqn.bin")
        nn.save_weights(self.target, d / "dqn_target.bin")
        return d

    def load(self, directory) -> "DQNAgent":
        d = Path(directory)
        self.net = nn.load_weights(d / "dqn.bin", self.net.dims)
        self.target = nn.load_weights(d / "dqn_target.bin", self.target.dims)
        self.opt = nn.Adam(self.net, self.config.lr)
        return self


def dqn_update(agent: DQNAgent, batch: Batch) -> float:
    return agent.dqn_update(batch)


# ---------------------------------------------------------------------- training loops
def train_q_learning(env: VSLEnv, config: QLearningConfig, checkpoint_dir=None) -> TrainingResult:
    agent = QLearningAgent(config)
    env.reward_kind = config.reward_kind
    rows, returns, aborted = [], [], []
    for ep, seed in enumerate(episode_seeds(config.seed, config.episodes, TRAIN_STREAM)):
        total = 0.0
        try:
            s = env.reset(seed=seed)
            while not env.done:
                a = agent.select_action(s, explore=True)
                s2, r, _, _ = env.step(a)
                agent.observe(s, a, r, s2)
                rows.append((ep, env.t - 1, config.reward_kind, float(r), float("nan"), float("nan"),
                             agent.epsilon))
                total += r
                s = s2
        except Exception as exc:  # noqa: BLE001
            log.error("episode %d aborted: %s", ep, exc)
            aborted.append(ep)
        agent.end_episode()
        returns.append(total)
    if checkpoint_dir is not None:
        agent.save(checkpoint_dir)
    return TrainingResult(agent, rows, returns, aborted)


def train_dqn(env: VSLEnv, config: DQNConfig, checkpoint_dir=None) -> TrainingResult:
    agent = DQNAgent(config)
    env.reward_kind = config.reward_kind
    rows, returns, aborted = [], [], []
    for ep, seed in enumerate(episode_seeds(config.seed, config.episodes, TRAIN_STREAM)):
        total = 0.0
        try:
            s = env.reset(seed=seed)
            while not env.done:
                a = agent.select_action(s, explore=True)
                s2, r, _, _ = env.step(a)
                agent.memory.add(env.t - 1, s, a, r, s2)
                out = agent.learn()
                loss, mean_q = out if out is not None else (float("nan"), float("nan"))
                rows.append((ep, env.t - 1, config.reward_kind, float(r), loss, mean_q, agent.epsilon))
                total += r
                s = s2
        except Exception as exc:  # noqa: BLE001
            log.error("episode %d aborted: %s", ep, exc)
            aborted.append(ep)
        returns.append(total)
    if checkpoint_dir is not None:
        agent.save(checkpoint_dir)
    return TrainingResult(agent, rows, returns, aborted)


def config_from_dict(cls, d: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} settings: {sorted(unknown)}")
    return cls(**d)

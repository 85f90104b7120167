"""DDPG controller for per-lane limits.

The actor maps the 11 occupancies to five values in (0, 6); exploration adds
Laplace noise to that output before it is floored onto limit indices. The
critic is trained on the indices actually posted (as floats) while the actor
follows dQ/da evaluated at its own continuous output. Replay samples by
recency rank: the newest transition has rank 1 and weight 1/rank.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import neural as nn
from .env import N_ACTIONS, N_LANES, REWARD_KINDS, STATE_DIM, VSLEnv, check_reward_kind, map_action_g
from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass
class AgentConfig:
    gamma: float = 0.99
    #: False drops the discount from the critic target (y = r + Q'), i.e. gamma acts as 1 there.
    discount_target: bool = True
    tau: float = 0.001
    batch_size: int = 64
    replay_capacity: int = 200_000
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    hidden: int = 120
    episodes: int = 150
    reward_kind: str = "r1_flow"
    noise_b0: float = 2.5
    noise_decay: float = 0.999
    #: Which actor picks actions during training and evaluation: "online" or "target".
    behavior_network: str = "online"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must lie in (0, 1], got {self.tau}")
        for name in ("batch_size", "replay_capacity", "hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.episodes < 0:
            raise ConfigError("episodes must be >= 0")
        if self.actor_lr <= 0 or self.critic_lr <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.noise_b0 <= 0 or not 0.0 < self.noise_decay <= 1.0:
            raise ConfigError("noise_b0 must be > 0 and noise_decay in (0, 1]")
        if self.behavior_network not in ("online", "target"):
            raise ConfigError("behavior_network must be 'online' or 'target'")
        check_reward_kind(self.reward_kind)

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown agent settings: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------- replay
@dataclass
class Batch:
    t: np.ndarray
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    idx: np.ndarray

    def __len__(self) -> int:
        return len(self.r)


class ReplayMemory:
    """Fixed-capacity ring of transitions sampled with probability proportional to 1/rank.

    Rank 1 is the most recent insertion; once full, the oldest entry is
    overwritten first.
    """

    def __init__(self, capacity: int, state_dim: int = STATE_DIM, action_dim: int = N_LANES):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.t = np.zeros(capacity, dtype=np.int64)
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.head = 0
        self.size = 0
        self.inserted = 0
        self._cum: np.ndarray | None = None

    def __len__(self) -> int:
        return self.size

    def add(self, t, s, a, r, s2) -> None:
        i = self.head
        self.t[i], self.s[i], self.a[i], self.r[i], self.s2[i] = t, s, a, r, s2
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.inserted += 1

    def index_of_rank(self, rank) -> np.ndarray:
        """Storage slot of the entry with the given 1-based recency rank."""
        rank = np.asarray(rank)
        if np.any(rank < 1) or np.any(rank > self.size):
            raise IndexError(f"rank out of 1..{self.size}")
        return (self.head - rank) % self.capacity

    def ranks(self) -> np.ndarray:
        """Recency rank of every occupied slot, in slot order."""
        slots = np.arange(self.size)
        return (self.head - slots - 1) % self.capacity + 1

    def probabilities(self) -> np.ndarray:
        """Sampling probability by rank (index 0 is rank 1)."""
        w = 1.0 / np.arange(1, self.size + 1)
        return w / w.sum()

    def _harmonic(self) -> np.ndarray:
        if self._cum is None:
            self._cum = np.cumsum(1.0 / np.arange(1, self.capacity + 1))
        return self._cum

    def sample_ranks(self, k: int, rng: np.random.Generator) -> np.ndarray:
        cum = self._harmonic()[: self.size]
        u = rng.random(k) * cum[-1]
        return np.minimum(np.searchsorted(cum, u, side="right"), self.size - 1) + 1

    def sample(self, k: int, rng: np.random.Generator) -> Batch | None:
        """``k`` transitions drawn with replacement, or None while fewer than ``k`` are stored."""
        if self.size < k or k < 1:
            return None
        idx = self.index_of_rank(self.sample_ranks(k, rng))
        return Batch(self.t[idx], self.s[idx], self.a[idx], self.r[idx], self.s2[idx], idx)


def sample_minibatch(memory: ReplayMemory, k: int, rng: np.random.Generator) -> Batch | None:
    return memory.sample(k, rng)


# ---------------------------------------------------------------------- exploration
class LaplaceNoise:
    """Laplace(0, b) noise whose scale decays geometrically with each exploring draw."""

    def __init__(self, b0: float = 2.5, decay: float = 0.999):
        if b0 <= 0 or not 0.0 < decay <= 1.0:
            raise ValueError("b0 must be > 0 and decay in (0, 1]")
        self.b0 = b0
        self.decay = decay
        self.n = 0

    @property
    def b(self) -> float:
        return self.b0 * self.decay ** self.n

    def sample(self, rng: np.random.Generator, size=N_LANES) -> np.ndarray:
        return laplace_sample(self.b, rng, size)

    def advance(self) -> None:
        self.n += 1


def laplace_sample(b: float, rng: np.random.Generator, size=N_LANES) -> np.ndarray:
    if not b > 0:
        raise ValueError("Laplace scale must be > 0")
    return rng.laplace(0.0, b, size)


# ---------------------------------------------------------------------- agent
class DDPGAgent:
    def __init__(self, config: AgentConfig | None = None, state_dim: int = STATE_DIM,
                 n_lanes: int = N_LANES, m: int = N_ACTIONS):
        self.config = config = config or AgentConfig()
        self.state_dim, self.n_lanes, self.m = state_dim, n_lanes, m
        init_ss, noise_ss, replay_ss = np.random.SeedSequence(config.seed).spawn(3)
        init_rng = np.random.default_rng(init_ss)
        self.noise_rng = np.random.default_rng(noise_ss)
        self.replay_rng = np.random.default_rng(replay_ss)
        self.actor = nn.actor_network(init_rng, state_dim, config.hidden, n_lanes, m)
        self.critic = nn.critic_network(init_rng, state_dim, n_lanes, config.hidden)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = nn.Adam(self.actor, config.actor_lr)
        self.critic_opt = nn.Adam(self.critic, config.critic_lr)
        self.memory = ReplayMemory(config.replay_capacity, state_dim, n_lanes)
        self.noise = LaplaceNoise(config.noise_b0, config.noise_decay)
        self.quarantined = 0

    @property
    def behavior_actor(self) -> nn.MLPParams:
        return self.actor if self.config.behavior_network == "online" else self.actor_target

    def select_action(self, s, explore: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """(continuous output, limit indices); exploring adds noise and decays its scale."""
        a_hat = nn.actor_forward(self.behavior_actor, s)
        if explore:
            a_hat = a_hat + self.noise.sample(self.noise_rng, self.n_lanes)
            self.noise.advance()
        return a_hat, map_action_g(a_hat, self.m)

    def critic_targets(self, batch: Batch) -> np.ndarray:
        a2 = map_action_g(nn.actor_forward(self.actor_target, batch.s2), self.m).astype(np.float64)
        q2 = nn.critic_forward(self.critic_target, batch.s2, a2)
        gamma = self.config.gamma if self.config.discount_target else 1.0
        return batch.r + gamma * q2

    def critic_update(self, batch: Batch) -> float:
        """One gradient step on the mean squared TD error; returns the loss before the step."""
        y = self.critic_targets(batch)
        ok = np.isfinite(y)
        if not np.all(ok):
            n_bad = int(np.sum(~ok))
            self.quarantined += n_bad
            log.warning("quarantined %d transitions with non-finite targets", n_bad)
            if not np.any(ok):
                return float("nan")
        x = np.concatenate([batch.s[ok], batch.a[ok]], axis=1)
        q, tr = nn.forward(self.critic, x)
        err = q[:, 0] - y[ok]
        loss = float(np.mean(err ** 2))
        grads, _ = nn.backward(self.critic, tr, (2.0 / len(err)) * err[:, None])
        self.critic_opt.step(self.critic, grads)
        return loss

    def actor_gradients(self, s: np.ndarray) -> tuple[nn.Gradients, float]:
        """Gradient of -mean Q(s, actor(s)) with respect to the actor weights, and mean Q."""
        a_hat, tr = nn.forward(self.actor, s)
        q, dq_da = nn.critic_action_gradient(self.critic, s, a_hat, self.state_dim)
        # chain rule through the continuous output: dL/da_hat = -dQ/da / N
        grads, _ = nn.backward(self.actor, tr, -dq_da / len(q))
        return grads, float(np.mean(q))

    def actor_update(self, batch: Batch) -> float:
        """Ascend Q(s, actor(s)) over the batch; returns the mean Q before the step."""
        grads, mean_q = self.actor_gradients(batch.s)
        if not self.actor_opt.step(self.actor, grads):
            log.warning("actor step skipped")
        return mean_q

    def update_targets(self) -> None:
        nn.soft_update(self.actor_target, self.actor, self.config.tau)
        nn.soft_update(self.critic_target, self.critic, self.config.tau)

    def learn(self) -> tuple[float, float] | None:
        """One replay update (critic, actor, targets), or None while the memory is too small."""
        batch = self.memory.sample(self.config.batch_size, self.replay_rng)
        if batch is None:
            return None
        loss = self.critic_update(batch)
        mean_q = self.actor_update(batch)
        self.update_targets()
        return loss, mean_q

    def greedy_action(self, s) -> np.ndarray:
        return self.select_action(s, explore=False)[1]

    # ---------------------------------------------------------------- checkpoints
    NETS = ("actor", "critic", "actor_target", "critic_target")

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in self.NETS:
            nn.save_weights(getattr(self, name), d / f"{name}.bin")
        return d

    def load(self, directory) -> "DDPGAgent":
        d = Path(directory)
        for name in self.NETS:
            current = getattr(self, name)
            setattr(self, name, nn.load_weights(d / f"{name}.bin", current.dims))
        self.actor_opt = nn.Adam(self.actor, self.config.actor_lr)
        self.critic_opt = nn.Adam(self.critic, self.config.critic_lr)
        return self


# ---------------------------------------------------------------------- training
LOG_COLUMNS = ("episode", "step", "reward_kind", "r", "critic_loss", "mean_q", "b")


def episode_seeds(seed: int, n: int, stream: int) -> list[int]:
    """Demand seeds for ``n`` episodes, derived from a base seed and a stream tag."""
    if n <= 0:
        return []
    return [int(x) for x in np.random.SeedSequence([seed, stream]).generate_state(n)]


TRAIN_STREAM = 1
EVAL_STREAM = 2


@dataclass
class TrainingResult:
    agent: object
    log: list[tuple]
    returns: list[float]
    aborted: list[int]

    def write_log(self, path) -> Path:
        return write_training_log(self.log, path)


def write_training_log(rows, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def _cell(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def train(env: VSLEnv, config: AgentConfig, agent: DDPGAgent | None = None,
          checkpoint_dir=None, checkpoint_every: int = 0) -> TrainingResult:
    """Train a DDPG agent for ``config.episodes`` episodes on fresh demand each episode.

    A failure inside an episode aborts that episode only; it is logged and
    training moves on. The noise scale keeps decaying across episodes.
    """
    agent = agent or DDPGAgent(config)
    env.reward_kind = config.reward_kind
    rows: list[tuple] = []
    returns: list[float] = []
    aborted: list[int] = []
    for ep, seed in enumerate(episode_seeds(config.seed, config.episodes, TRAIN_STREAM)):
        total = 0.0
        try:
            s = env.reset(seed=seed)
            while not env.done:
                _, a = agent.select_action(s, explore=True)
                s2, r, _, _ = env.step(a)
                # the episode end is a time limit, so s2 is always bootstrapped
                agent.memory.add(env.t - 1, s, a, r, s2)
                out = agent.learn()
                loss, mean_q = out if out is not None else (float("nan"), float("nan"))
                rows.append((ep, env.t - 1, config.reward_kind, float(r), loss, mean_q, agent.noise.b))
                total += r
                s = s2
        except Exception as exc:  # noqa: BLE001 - keep training through simulator faults
            log.error("episode %d aborted: %s", ep, exc)
            aborted.append(ep)
        returns.append(total)
        if checkpoint_dir is not None and checkpoint_every and (ep + 1) % checkpoint_every == 0:
            agent.save(Path(checkpoint_dir) / f"episode_{ep + 1:04d}")
    if checkpoint_dir is not None:
        agent.save(checkpoint_dir)
    return TrainingResult(agent, rows, returns, aborted)


__all__ = ["AgentConfig", "Batch", "DDPGAgent", "LaplaceNoise", "LOG_COLUMNS", "REWARD_KINDS",
           "ReplayMemory", "TrainingResult", "episode_seeds", "laplace_sample", "sample_minibatch",
           "train", "write_training_log"]

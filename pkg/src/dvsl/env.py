"""The control problem seen by an agent.

One control step posts five lane limits on the controlled section, runs the
simulator for one control interval (60 one-second steps by default) and
returns the 11 detector occupancies together with a reward. Four reward
signals are available: throughput (``r1_flow``), mean merge-area speed
(``r2_bottleneck_speed``), emergency braking (``r3_safety``) and weighted
emissions (``r4_emission``). All four are computed every step and kept in
the trace; the selected one is returned to the agent.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ProtocolError
from .sim import World, accumulate_emissions, count_emergency_brakes, flow_counts, read_detectors
from .sim.scenario import SPEED_TABLE, Scenario
from .sim.world import EmissionTotals, TTSReport

N_ACTIONS = len(SPEED_TABLE)
N_LANES = 5
STATE_DIM = 11
REWARD_KINDS = ("r1_flow", "r2_bottleneck_speed", "r3_safety", "r4_emission")
#: Emission weights (kg) for CO, HC, NOx and PMx.
EMISSION_STANDARDS = (1.5, 0.13, 0.04, 0.01)


def check_reward_kind(kind: str) -> str:
    if kind not in REWARD_KINDS:
        raise ConfigError(f"unknown reward kind {kind!r}; expected one of {REWARD_KINDS}")
    return kind


def map_action_g(a_hat, m: int = N_ACTIONS) -> np.ndarray:
    """Turn a continuous actor output into limit indices in ``0..m-1``.

    Values are clipped to ``[0, m]`` and floored; the single value ``m`` that
    survives clipping is folded onto ``m - 1``.
    """
    a_hat = np.asarray(a_hat, dtype=np.float64)
    if not np.all(np.isfinite(a_hat)):
        raise ValueError(f"action contains non-finite values: {a_hat}")
    idx = np.floor(np.clip(a_hat, 0.0, float(m))).astype(np.int64)
    return np.minimum(idx, m - 1)


def action_to_speeds(a) -> np.ndarray:
    """Posted limits (m/s) for limit indices, looked up in ``SPEED_TABLE``."""
    a = np.asarray(a)
    if a.dtype.kind not in "iu":
        if not np.all(np.equal(np.mod(a, 1), 0)):
            raise ValueError(f"action indices must be integers, got {a}")
        a = a.astype(np.int64)
    if np.any(a < 0) or np.any(a >= N_ACTIONS):
        raise ValueError(f"action indices must lie in 0..{N_ACTIONS - 1}, got {a}")
    return np.asarray(SPEED_TABLE)[a]


def emission_reward(totals: EmissionTotals) -> float:
    return -float(np.dot(totals.as_array(), 1.0 / np.asarray(EMISSION_STANDARDS)))


@dataclass
class IntervalStats:
    """Everything measured over one control interval."""

    state: np.ndarray
    merge_speed: np.ndarray
    f_in: int
    f_out: int
    brakes: int
    emissions: EmissionTotals = field(default_factory=EmissionTotals)

    def rewards(self) -> dict[str, float]:
        return {
            "r1_flow": float(self.f_out - self.f_in),
            "r2_bottleneck_speed": float(np.mean(self.merge_speed)),
            "r3_safety": float(-self.brakes),
            "r4_emission": emission_reward(self.emissions),
        }


def observe(world: World) -> np.ndarray:
    """Occupancies since the previous read, ordered merge lanes, upstream lanes, ramp."""
    merge = read_detectors(world, "merge").occupancy
    upstream = read_detectors(world, "upstream").occupancy
    ramp = read_detectors(world, "ramp").occupancy
    return np.clip(np.concatenate([merge, upstream, ramp]), 0.0, 1.0)


def collect_interval(world: World) -> IntervalStats:
    """Read and reset every interval accumulator of ``world``."""
    merge = read_detectors(world, "merge")
    upstream = read_detectors(world, "upstream")
    ramp = read_detectors(world, "ramp")
    read_detectors(world, "outflow_boundaries")
    state = np.clip(np.concatenate([merge.occupancy, upstream.occupancy, ramp.occupancy]), 0.0, 1.0)
    f_in, f_out = flow_counts(world)
    return IntervalStats(state, merge.mean_speed, f_in, f_out,
                         count_emergency_brakes(world), accumulate_emissions(world))


def reward(kind: str, stats: IntervalStats) -> float:
    """The selected reward for one interval's measurements."""
    return stats.rewards()[check_reward_kind(kind)]


TRACE_COLUMNS = (["t"] + [f"s{i}" for i in range(STATE_DIM)] + [f"a{i}" for i in range(N_LANES)]
                 + [f"v{i}" for i in range(N_LANES)] + list(REWARD_KINDS)
                 + ["theta", "co", "hc", "nox", "pmx", "f_in", "f_out"])


class VSLEnv:
    """Episode wrapper around :class:`World`.

    ``reset`` starts an empty network and returns the all-zero state. ``step``
    takes five limit indices. The episode ends after
    ``scenario.control_steps`` steps; ``done`` marks the time limit, not an
    absorbing state.
    """

    def __init__(self, scenario: Scenario, reward_kind: str = "r1_flow", seed: int | None = None):
        self.scenario = scenario
        self.reward_kind = check_reward_kind(reward_kind)
        self.seed = seed
        self.world: World | None = None
        self.t = 0
        self.trace: list[list[float]] = []
        self.interval_flows: list[tuple[int, int]] = []
        self.limit_trace: list[np.ndarray] = []

    @property
    def horizon(self) -> int:
        return self.scenario.control_steps

    @property
    def done(self) -> bool:
        return self.world is not None and self.t >= self.horizon

    def reset(self, seed: int | None = None, schedule: np.ndarray | None = None) -> np.ndarray:
        if seed is not None:
            self.seed = seed
        self.world = World(self.scenario, schedule=schedule, seed=self.seed)
        self.t = 0
        self.trace = []
        self.interval_flows = []
        self.limit_trace = []
        return np.zeros(STATE_DIM)

    def step(self, a: Sequence[int]) -> tuple[np.ndarray, float, bool, dict]:
        if self.world is None:
            raise ProtocolError("call reset() before step()")
        if self.done:
            raise ProtocolError("episode is finished; call reset()")
        a = np.asarray(a)
        if a.shape != (N_LANES,):
            raise ValueError(f"expected {N_LANES} limit indices, got shape {a.shape}")
        limits = action_to_speeds(a)
        self.world.step(limits, self.scenario.steps_per_interval)
        stats = collect_interval(self.world)
        rewards = stats.rewards()
        self.t += 1
        self.interval_flows.append((stats.f_in, stats.f_out))
        self.limit_trace.append(limits)
        self.trace.append([self.world.time, *stats.state, *a, *limits,
                           *(rewards[k] for k in REWARD_KINDS), stats.brakes,
                           *stats.emissions.as_array(), stats.f_in, stats.f_out])
        info = {"rewards": rewards, "stats": stats, "limits": limits}
        return stats.state, rewards[self.reward_kind], self.done, info

    def episode_tts(self) -> TTSReport:
        """Travel-time accounting, with the reconstruction built from the interval flow counts."""
        if self.world is None:
            raise ProtocolError("no episode has been run")
        flows = np.array(self.interval_flows, dtype=np.float64).reshape(-1, 2)
        return self.world.tts(flows, self.scenario.control_interval)

    def trace_array(self) -> np.ndarray:
        return np.array(self.trace, dtype=np.float64).reshape(-1, len(TRACE_COLUMNS))

    def write_trace(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for row in self.trace:
                w.writerow([_fmt(v) for v in row])
        return path


def _fmt(v: float) -> str:
    if float(v).is_integer() and abs(v) < 2**53:
        return str(int(v))
    return repr(float(v))


def run_fixed(scenario: Scenario, a: Sequence[int], seed: int) -> tuple[VSLEnv, float]:
    """Run one episode under a constant action; returns the env and the ATT."""
    env = VSLEnv(scenario, seed=seed)
    env.reset()
    while not env.done:
        env.step(a)
    return env, env.episode_tts().att

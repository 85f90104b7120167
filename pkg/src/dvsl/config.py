"""Run configuration: presets, YAML loading and validation.

A run file is a YAML mapping::

    preset: desk              # desk (2 h episodes) or paper (18 h)
    seed: 0
    out: runs/example
    scenario: null            # null, a path to a scenario YAML, or an inline mapping
    train:
      agent: ddpg             # ddpg | qlearning | dqn
      reward: r1_flow
      episodes: null          # null means the preset default
      checkpoint_every: 0
      ddpg: {}                # AgentConfig overrides
    eval:
      episodes: null
      seed: 1000              # base of the demand seed list shared by all controllers
      workers: 1
      traces: true
      controllers: {}         # name -> {kind: novsl} or {checkpoint: path}

Every random draw is derived from the seeds in this file.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .env import REWARD_KINDS
from .errors import ConfigError
from .sim.scenario import Scenario, desk_scenario, paper_scenario

PRESETS = {
    "desk": {"train_episodes": 30, "eval_episodes": 10},
    "paper": {"train_episodes": 150, "eval_episodes": 50},
}
AGENT_KINDS = ("ddpg", "qlearning", "dqn")
CONTROLLER_KINDS = ("novsl",) + AGENT_KINDS
#: Baselines learn from the throughput reward only.
VALID_PAIRS = tuple([("ddpg", k) for k in REWARD_KINDS] + [("qlearning", "r1_flow"), ("dqn", "r1_flow")])


class UsageError(ConfigError):
    """A request that is well-formed YAML but not a supported combination."""


def check_pair(agent: str, reward: str) -> None:
    if (agent, reward) not in VALID_PAIRS:
        pairs = ", ".join(f"{a}/{r}" for a, r in VALID_PAIRS)
        raise UsageError(f"unsupported agent/reward pair {agent}/{reward}; valid pairs: {pairs}")


@dataclass
class TrainSection:
    agent: str = "ddpg"
    reward: str = "r1_flow"
    episodes: int | None = None
    checkpoint_every: int = 0
    ddpg: dict = field(default_factory=dict)
    qlearning: dict = field(default_factory=dict)
    dqn: dict = field(default_factory=dict)


@dataclass
class EvalSection:
    episodes: int | None = None
    seed: int = 1000
    workers: int = 1
    traces: bool = True
    controllers: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    out: str = "runs/default"
    scenario: Any = None
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {sorted(PRESETS)}, got {self.preset!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed must be an explicit integer")
        if self.train.agent not in AGENT_KINDS:
            raise UsageError(f"unknown agent {self.train.agent!r}; expected one of {AGENT_KINDS}")
        if self.train.reward not in REWARD_KINDS:
            raise UsageError(f"unknown reward {self.train.reward!r}; expected one of {REWARD_KINDS}")
        if self.train.episodes is not None and self.train.episodes < 0:
            raise ConfigError("train.episodes must be >= 0")
        if self.eval.episodes is not None and self.eval.episodes < 0:
            raise ConfigError("eval.episodes must be >= 0")
        if self.eval.workers < 1:
            raise ConfigError("eval.workers must be >= 1")

    @property
    def train_episodes(self) -> int:
        e = self.train.episodes
        return PRESETS[self.preset]["train_episodes"] if e is None else int(e)

    @property
    def eval_episodes(self) -> int:
        e = self.eval.episodes
        return PRESETS[self.preset]["eval_episodes"] if e is None else int(e)

    @property
    def out_dir(self) -> Path:
        return self.resolve(self.out)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def build_scenario(self) -> Scenario:
        base = desk_scenario(self.seed) if self.preset == "desk" else paper_scenario(self.seed)
        sc = self.scenario
        if sc is None:
            return base
        if isinstance(sc, (str, Path)):
            path = self.resolve(sc)
            if not path.exists():
                raise ConfigError(f"scenario file not found: {path}")
            sc = load_yaml(path)
        if not isinstance(sc, dict):
            raise ConfigError("scenario must be a mapping or a path")
        merged = _deep_merge(base.to_dict(), sc)
        return Scenario.from_dict(merged)

    def to_dict(self) -> dict:
        return {
            "preset": self.preset, "seed": self.seed, "out": str(self.out),
            "scenario": self.scenario if not isinstance(self.scenario, Path) else str(self.scenario),
            "train": vars(self.train).copy(), "eval": vars(self.eval).copy(),
        }


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "hourly_rates":
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_yaml(path) -> Any:
    try:
        with Path(path).open() as fh:
            return yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None


def _section(cls, d, name):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{name} must be a mapping")
    known = set(cls.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
    return cls(**d)


def config_from_dict(d: dict | None, base_dir=None) -> RunConfig:
    d = dict(d or {})
    known = {"preset", "seed", "out", "scenario", "train", "eval"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    train = _section(TrainSection, d.pop("train", None), "train")
    ev = _section(EvalSection, d.pop("eval", None), "eval")
    return RunConfig(train=train, eval=ev, base_dir=Path(base_dir) if base_dir else Path.cwd(), **d)


def load_config(path=None, **overrides) -> RunConfig:
    """Read a run file (or start from defaults) and apply non-None overrides."""
    data: dict = {}
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        data = load_yaml(path) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        base_dir = path.parent
    for k, v in overrides.items():
        if v is not None:
            data[k] = v
    return config_from_dict(data, base_dir)

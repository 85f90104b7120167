"""Experiment commands: train, evaluate, probe and report.

Each ``cmd_*`` function takes a :class:`~dvsl.config.RunConfig`, writes its
artifacts under ``run.out_dir`` and returns an in-memory result. Outputs
contain no timestamps or host details, so equal configs give byte-identical
files.
"""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import baselines as bl
from .config import CONTROLLER_KINDS, RunConfig, check_pair
from .ddpg import EVAL_STREAM, AgentConfig, DDPGAgent, TrainingResult, episode_seeds, train
from .env import N_LANES, REWARD_KINDS, STATE_DIM, TRACE_COLUMNS, VSLEnv, action_to_speeds
from .errors import ConfigError
from .sim.demand import generate_demand, schedule_checksum
from .sim.scenario import POLLUTANTS, Scenario

log = logging.getLogger(__name__)


class MissingCheckpointError(ConfigError):
    """A controller's checkpoint directory or files are absent."""


# ---------------------------------------------------------------------- agents
def agent_config(run: RunConfig):
    t = run.train
    check_pair(t.agent, t.reward)
    common = {"episodes": run.train_episodes, "reward_kind": t.reward, "seed": run.seed}
    if t.agent == "ddpg":
        return AgentConfig.from_dict({**t.ddpg, **common})
    if t.agent == "qlearning":
        return bl.config_from_dict(bl.QLearningConfig, {**t.qlearning, **common})
    return bl.config_from_dict(bl.DQNConfig, {**t.dqn, **common})


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def cmd_train(run: RunConfig) -> TrainingResult:
    """Train the configured agent; writes checkpoint/, train_log.csv and returns.csv."""
    cfg = agent_config(run)
    scenario = run.build_scenario()
    out = run.out_dir
    ckpt = out / "checkpoint"
    ckpt.mkdir(parents=True, exist_ok=True)
    env = VSLEnv(scenario, cfg.reward_kind)
    kind = run.train.agent
    if kind == "ddpg":
        result = train(env, cfg, checkpoint_dir=ckpt, checkpoint_every=run.train.checkpoint_every)
    elif kind == "qlearning":
        result = bl.train_q_learning(env, cfg, checkpoint_dir=ckpt)
    else:
        result = bl.train_dqn(env, cfg, checkpoint_dir=ckpt)
    _write_json(ckpt / "agent.json", {"kind": kind, "reward_kind": cfg.reward_kind,
                                      "config": vars(cfg).copy()})
    result.write_log(out / "train_log.csv")
    with (out / "returns.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "return", "aborted"])
        for ep, ret in enumerate(result.returns):
            w.writerow([ep, repr(float(ret)), int(ep in result.aborted)])
    (out / "run_config.yaml").write_text(yaml.safe_dump(run.to_dict(), sort_keys=True))
    (out / "scenario.yaml").write_text(yaml.safe_dump(scenario.to_dict(), sort_keys=True))
    return result


# ---------------------------------------------------------------------- controllers
@dataclass
class ControllerSpec:
    name: str
    kind: str
    checkpoint: str | None = None


def parse_controllers(specs: dict, run: RunConfig | None = None) -> list[ControllerSpec]:
    """``name -> "novsl" | path | {kind, checkpoint}`` into specs; checkpoint kinds come from agent.json."""
    out = []
    for name, ctl in specs.items():
        if ctl == "novsl" or (isinstance(ctl, dict) and ctl.get("kind") == "novsl"):
            out.append(ControllerSpec(name, "novsl"))
            continue
        path = ctl.get("checkpoint") if isinstance(ctl, dict) else ctl
        if path is None:
            raise ConfigError(f"controller {name!r} needs a checkpoint")
        p = run.resolve(path) if run is not None else Path(path)
        meta = p / "agent.json"
        if not meta.exists():
            raise MissingCheckpointError(f"controller {name!r}: no checkpoint at {p}")
        kind = json.loads(meta.read_text())["kind"]
        if kind not in CONTROLLER_KINDS:
            raise ConfigError(f"controller {name!r}: unknown kind {kind!r}")
        out.append(ControllerSpec(name, kind, str(p)))
    return out


def load_policy(ctl: ControllerSpec):
    """Greedy policy ``s -> limit indices`` for a controller."""
    if ctl.kind == "novsl":
        return bl.no_control_action
    d = Path(ctl.checkpoint)
    try:
        meta = json.loads((d / "agent.json").read_text())
    except FileNotFoundError:
        raise MissingCheckpointError(f"controller {ctl.name!r}: no checkpoint at {d}") from None
    cfg = dict(meta["config"])
    try:
        if ctl.kind == "ddpg":
            agent = DDPGAgent(AgentConfig.from_dict(cfg)).load(d)
        elif ctl.kind == "qlearning":
            agent = bl.QLearningAgent(bl.config_from_dict(bl.QLearningConfig, cfg)).load(d)
        else:
            agent = bl.DQNAgent(bl.config_from_dict(bl.DQNConfig, cfg)).load(d)
    except FileNotFoundError as exc:
        raise MissingCheckpointError(f"controller {ctl.name!r}: {exc}") from None
    return agent.greedy_action


# ---------------------------------------------------------------------- evaluation
METRICS = list(REWARD_KINDS) + ["theta"] + list(POLLUTANTS) + ["att", "completed", "remaining", "tts"]
EPISODE_COLUMNS = ["controller", "episode", "demand_seed", "demand_checksum"] + METRICS


def run_episode(scenario: Scenario, policy, demand_seed: int):
    """One frozen-policy episode; returns (metrics row, env)."""
    schedule = generate_demand(scenario.demand, demand_seed)
    env = VSLEnv(scenario)
    s = env.reset(schedule=schedule)
    while not env.done:
        s, _, _, _ = env.step(policy(s))
    tr = env.trace_array()
    cols = {name: i for i, name in enumerate(TRACE_COLUMNS)}
    tts = env.episode_tts()
    row = {k: float(tr[:, cols[k]].sum()) if len(tr) else 0.0 for k in REWARD_KINDS}
    row["theta"] = float(tr[:, cols["theta"]].sum()) if len(tr) else 0.0
    for p in POLLUTANTS:
        row[p] = float(tr[:, cols[p]].sum()) if len(tr) else 0.0
    # ATT is defined over vehicles that finished; 0 with completed == 0 flags the empty case
    row.update(att=tts.att, completed=tts.completed, remaining=tts.remaining, tts=tts.direct)
    row["demand_checksum"] = schedule_checksum(schedule)
    return row, env


def _eval_job(args):
    scenario, ctl, ep, seed, trace_dir = args
    policy = load_policy(ctl)
    row, env = run_episode(scenario, policy, seed)
    if trace_dir is not None:
        env.write_trace(Path(trace_dir) / f"{ctl.name}_ep{ep:03d}.csv")
    row.update(controller=ctl.name, episode=ep, demand_seed=seed)
    return row, np.array(env.limit_trace)


@dataclass
class EvaluationReport:
    controllers: list[str]
    episodes: int
    seeds: list[int]
    checksums: list[str]
    rows: list[dict]
    limit_traces: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def means(self) -> dict[str, dict[str, float]]:
        out = {}
        for name in self.controllers:
            rs = [r for r in self.rows if r["controller"] == name]
            out[name] = {m: float(np.mean([r[m] for r in rs])) if rs else 0.0 for m in METRICS}
        return out

    def to_json(self) -> dict:
        return {"controllers": self.controllers, "episodes": self.episodes, "seeds": self.seeds,
                "demand_checksums": self.checksums, "means": self.means(), "rows": self.rows}


def cmd_eval(run: RunConfig, controllers: dict | None = None) -> EvaluationReport:
    """Evaluate frozen controllers on a shared list of demand seeds.

    Writes eval/eval.json, eval/episodes.csv, eval/summary.csv, per-episode
    traces and the limit correlation matrix of episode 0.
    """
    specs = parse_controllers(controllers if controllers is not None else run.eval.controllers or
                              {"NoVSL": "novsl"}, run)
    for ctl in specs:
        load_policy(ctl)  # fail early on missing or malformed checkpoints
    scenario = run.build_scenario()
    n = run.eval_episodes
    seeds = episode_seeds(run.eval.seed, n, EVAL_STREAM)
    out = run.out_dir / "eval"
    trace_dir = out / "traces" if run.eval.traces else None
    (trace_dir or out).mkdir(parents=True, exist_ok=True)
    jobs = [(scenario, ctl, ep, seed, trace_dir) for ctl in specs for ep, seed in enumerate(seeds)]
    if run.eval.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=run.eval.workers) as pool:
            results = list(pool.map(_eval_job, jobs))
    else:
        results = [_eval_job(j) for j in jobs]
    rows = [r for r, _ in results]
    traces: dict[str, list[np.ndarray]] = {s.name: [] for s in specs}
    for (row, lim) in results:
        traces[row["controller"]].append(lim)
    checksums = [r["demand_checksum"] for r in rows if r["controller"] == specs[0].name] if specs else []
    for r in rows:
        if r["demand_checksum"] != checksums[r["episode"]]:
            raise RuntimeError(f"demand differs for {r['controller']} episode {r['episode']}")
    report = EvaluationReport([s.name for s in specs], n, seeds, checksums, rows, traces)
    _write_json(out / "eval.json", report.to_json())
    _write_rows(out / "episodes.csv", EPISODE_COLUMNS, rows)
    means = report.means()
    _write_rows(out / "summary.csv", ["controller"] + METRICS,
                [{"controller": c, **means[c]} for c in report.controllers])
    if n:
        write_correlation(out / "correlation.csv", {c: traces[c][0] for c in report.controllers})
    return report


def _write_rows(path: Path, columns, rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
    return path


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return "undefined"
    return str(v)


# ---------------------------------------------------------------------- correlation
def policy_correlation(trace_a, trace_b) -> float | None:
    """Pearson correlation of two flattened limit traces; None when either has zero variance."""
    a = np.asarray(trace_a, dtype=np.float64).ravel()
    b = np.asarray(trace_b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"traces differ in length: {a.size} vs {b.size}")
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.sqrt(np.dot(da, da)), np.sqrt(np.dot(db, db))
    if na == 0.0 or nb == 0.0:
        return None
    return float(np.clip(np.dot(da, db) / (na * nb), -1.0, 1.0))


def correlation_matrix(traces: dict[str, np.ndarray]) -> dict[str, dict[str, float | None]]:
    names = list(traces)
    return {a: {b: policy_correlation(traces[a], traces[b]) for b in names} for a in names}


def write_correlation(path: Path, traces: dict[str, np.ndarray]) -> Path:
    m = correlation_matrix(traces)
    names = list(traces)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + names)
        for a in names:
            w.writerow([a] + [_fmt(m[a][b]) for b in names])
    return path


# ---------------------------------------------------------------------- probe
N_PROBE = 16


def probe_states(n: int = N_PROBE) -> np.ndarray:
    """Synthetic occupancies: 0.05 everywhere except the merge entries, which are 0.05 * j."""
    s = np.full((n, STATE_DIM), 0.05)
    s[:, :N_LANES] = (0.05 * np.arange(n))[:, None]
    return s


@dataclass
class ProbeResult:
    states: np.ndarray
    limits: dict[str, np.ndarray]

    def to_json(self) -> dict:
        return {"states": self.states.tolist(), "limits": {k: v.tolist() for k, v in self.limits.items()}}


def probe_policy(policy, states: np.ndarray) -> np.ndarray:
    return np.array([action_to_speeds(policy(s)) for s in states])


def cmd_probe(run: RunConfig, controllers: dict) -> ProbeResult:
    """Limits chosen by each greedy policy on the 16 probe states; writes probe/probe.csv and .json."""
    specs = parse_controllers(controllers, run)
    states = probe_states()
    result = ProbeResult(states, {s.name: probe_policy(load_policy(s), states) for s in specs})
    out = run.out_dir / "probe"
    out.mkdir(parents=True, exist_ok=True)
    cols = ["controller", "j"] + [f"s{i}" for i in range(STATE_DIM)] + [f"v{i}" for i in range(N_LANES)]
    rows = []
    for name, lim in result.limits.items():
        for j in range(len(states)):
            rows.append({"controller": name, "j": j, **{f"s{i}": states[j, i] for i in range(STATE_DIM)},
                         **{f"v{i}": lim[j, i] for i in range(N_LANES)}})
    _write_rows(out / "probe.csv", cols, rows)
    _write_json(out / "probe.json", result.to_json())
    return result


# ---------------------------------------------------------------------- report
#: (metric, header, divisor, True if larger is better)
REPORT_COLUMNS = [
    ("r1_flow", "r1(1e3)", 1e3, True),
    ("r2_bottleneck_speed", "r2(1e3)", 1e3, True),
    ("r3_safety", "r3(1e3)", 1e3, True),
    ("r4_emission", "r4(1e7)", 1e7, True),
    ("co", "CO(kg)", 1.0, False),
    ("hc", "HC(kg)", 1.0, False),
    ("nox", "NOx(kg)", 1.0, False),
    ("pmx", "PMx(kg)", 1.0, False),
    ("att", "ATT(s)", 1.0, False),
]


def best_controllers(means: dict[str, dict[str, float]], metric: str, larger: bool) -> list[str]:
    """All controllers attaining the best mean of ``metric`` (ties are all marked)."""
    vals = {c: m[metric] for c, m in means.items()}
    best = max(vals.values()) if larger else min(vals.values())
    return [c for c, v in vals.items() if v == best]


def cmd_report(run: RunConfig, eval_dirs: list) -> dict:
    """Merge evaluation outputs into one comparison table.

    Writes report/report.txt (best values starred), report/report.json,
    report/limits_timeseries.csv and, where probe results sit next to an
    evaluation, report/probe_limits.csv.
    """
    if not eval_dirs:
        raise ConfigError("report needs at least one evaluation directory")
    means: dict[str, dict[str, float]] = {}
    episodes, seeds = None, None
    series_rows, probe_rows = [], []
    for d in eval_dirs:
        d = run.resolve(d)
        path = d / "eval.json" if (d / "eval.json").exists() else d / "eval" / "eval.json"
        if not path.exists():
            raise ConfigError(f"no evaluation output in {d}")
        data = json.loads(path.read_text())
        if episodes is None:
            episodes, seeds = data["episodes"], data["seeds"]
        elif data["episodes"] != episodes:
            raise ConfigError(f"mixed episode counts: {episodes} vs {data['episodes']} in {path}")
        elif data["seeds"] != seeds:
            raise ConfigError(f"evaluation seeds differ in {path}")
        for name in data["controllers"]:
            if name in means:
                raise ConfigError(f"controller {name!r} appears in more than one evaluation")
            means[name] = data["means"][name]
            trace = path.parent / "traces" / f"{name}_ep000.csv"
            if trace.exists():
                with trace.open(newline="") as fh:
                    for r in csv.DictReader(fh):
                        series_rows.append({"controller": name, "t": r["t"],
                                            **{f"v{i}": r[f"v{i}"] for i in range(N_LANES)}})
        probe = path.parent.parent / "probe" / "probe.csv"
        if probe.exists():
            with probe.open(newline="") as fh:
                probe_rows.extend(csv.DictReader(fh))
    best = {m: best_controllers(means, m, larger) for m, _, _, larger in REPORT_COLUMNS}
    header = ["controller"] + [h for _, h, _, _ in REPORT_COLUMNS]
    lines = [header]
    for name, m in means.items():
        cells = [name]
        for metric, _, div, _ in REPORT_COLUMNS:
            cell = f"{m[metric] / div:.4g}"
            cells.append(cell + ("*" if name in best[metric] else ""))
        lines.append(cells)
    widths = [max(len(r[i]) for r in lines) for i in range(len(header))]
    text = "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in lines)
    text += f"\n\n{episodes} evaluation episodes per controller; * marks the best value per column.\n"
    out = run.out_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text)
    payload = {"episodes": episodes, "seeds": seeds, "means": means, "best": best,
               "columns": [{"metric": m, "header": h, "divisor": d, "larger_is_better": g}
                           for m, h, d, g in REPORT_COLUMNS]}
    _write_json(out / "report.json", payload)
    _write_rows(out / "limits_timeseries.csv", ["controller", "t"] + [f"v{i}" for i in range(N_LANES)],
                series_rows)
    if probe_rows:
        cols = list(probe_rows[0].keys())
        _write_rows(out / "probe_limits.csv", cols, probe_rows)
    payload["text"] = text
    return payload

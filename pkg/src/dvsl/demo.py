"""A small end-to-end run that finishes in well under a minute."""
from __future__ import annotations

import copy

from . import harness
from .config import RunConfig
from .sim.scenario import desk_hourly_profile


def demo_config(run: RunConfig) -> RunConfig:
    """One hour of the desk demand, three training episodes, two evaluation episodes."""
    demo = copy.deepcopy(run)
    peak = {route: rates[:1] for route, rates in desk_hourly_profile().items()}
    demo.scenario = {"demand": {"hourly_rates": peak}}
    demo.train.agent, demo.train.reward, demo.train.episodes = "ddpg", "r1_flow", 3
    demo.eval.episodes = 2
    return demo


def run_demo(run: RunConfig) -> dict:
    demo = demo_config(run)
    root = demo.out_dir
    print(f"training DDPG on the throughput reward for {demo.train.episodes} one-hour episodes")
    res = harness.cmd_train(demo)
    print("  episode returns:", ", ".join(f"{r:.0f}" for r in res.returns))
    ckpt = str(root / "checkpoint")
    controllers = {"NoVSL": "novsl", "DDPG-r1": ckpt}
    report = harness.cmd_eval(demo, controllers)
    for name, m in report.means().items():
        print(f"  {name:>8}: ATT {m['att']:.1f} s, emergency brakes {m['theta']:.0f}")
    probe = harness.cmd_probe(demo, {"DDPG-r1": ckpt})
    print("  probe limits (m/s) at j = 0 and j = 15:",
          probe.limits["DDPG-r1"][0].round(2).tolist(), probe.limits["DDPG-r1"][-1].round(2).tolist())
    payload = harness.cmd_report(demo, [str(root / "eval")])
    print(payload["text"], end="")
    print(f"artifacts in {root}")
    return payload

"""Train a DDPG controller on the throughput reward and compare it with no control.

``python3 demos/03_train_and_evaluate.py --episodes 5`` runs in a couple of
minutes; the default of 30 episodes is the desk preset used by the
acceptance tests. Everything lands in ``runs/demo_train`` next to the
package root.
"""
import argparse
from pathlib import Path

from dvsl import harness
from dvsl.config import config_from_dict

p = argparse.ArgumentParser()
p.add_argument("--episodes", type=int, default=30)
p.add_argument("--seed", type=int, default=0)
p.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "runs" / "demo_train"))
args = p.parse_args()

run = config_from_dict({"preset": "desk", "seed": args.seed, "out": args.out,
                        "train": {"agent": "ddpg", "reward": "r1_flow", "episodes": args.episodes}})
print(f"training for {args.episodes} two-hour episodes ...")
res = harness.cmd_train(run)
for ep in range(0, len(res.returns), max(1, len(res.returns) // 10)):
    print(f"  episode {ep:3d}: accumulated r1 {res.returns[ep]:8.0f}")

ckpt = str(run.out_dir / "checkpoint")
report = harness.cmd_eval(run, {"NoVSL": "novsl", "DDPG-r1": ckpt})
print("\nevaluation on", report.episodes, "shared demand seeds")
for name, m in report.means().items():
    print(f"  {name:>8}: ATT {m['att']:6.1f} s   brakes {m['theta']:6.1f}   CO {m['co']:.2f} kg")

probe = harness.cmd_probe(run, {"DDPG-r1": ckpt})
print("\nlimits chosen as merge occupancy rises (m/s, lanes 0-4):")
for j in (0, 5, 10, 15):
    print(f"  merge occupancy {0.05 * j:.2f}: {probe.limits['DDPG-r1'][j].tolist()}")
print("\n" + harness.cmd_report(run, [str(run.out_dir / "eval")])["text"])

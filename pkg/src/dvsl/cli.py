"""``dvsl`` command line.

Exit codes: 0 success, 2 usage error, 3 configuration error (bad or
missing config, scenario or checkpoint), 4 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .config import PRESETS, UsageError, load_config
from .errors import ConfigError, CorruptFileError, ShapeError

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4


def _controller_arg(text: str) -> tuple[str, str]:
    name, sep, path = text.partition("=")
    if not sep:
        # bare path: name the controller after its run directory
        p = Path(text)
        return (p.parent.name if p.name == "checkpoint" else p.name), text
    return name, path


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration YAML")
    common.add_argument("--seed", type=int, help="base seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--preset", choices=sorted(PRESETS), help="desk: 2 h episodes; paper: 18 h")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dvsl", description="Differential variable speed limit experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train one agent")
    t.add_argument("--agent", choices=("ddpg", "qlearning", "dqn"))
    t.add_argument("--reward", help="r1_flow | r2_bottleneck_speed | r3_safety | r4_emission")
    t.add_argument("--episodes", type=int)

    e = sub.add_parser("eval", parents=[common], help="evaluate frozen controllers on shared demand")
    e.add_argument("--controller", action="append", default=[], metavar="NAME=CHECKPOINT",
                   help="checkpoint directory (repeatable); NAME=novsl adds the uncontrolled baseline")
    e.add_argument("--no-baseline", action="store_true", help="do not add NoVSL automatically")
    e.add_argument("--episodes", type=int)
    e.add_argument("--workers", type=int)

    pr = sub.add_parser("probe", parents=[common], help="query greedy policies on the 16 probe states")
    pr.add_argument("--controller", action="append", default=[], metavar="NAME=CHECKPOINT")

    r = sub.add_parser("report", parents=[common], help="merge evaluation outputs into one table")
    r.add_argument("evals", nargs="+", help="evaluation output directories")

    sub.add_parser("demo", parents=[common], help="tiny end-to-end run: train, eval, probe, report")
    return p


def _run_config(args):
    out = str(Path(args.out).resolve()) if args.out else None
    return load_config(args.config, preset=args.preset, seed=args.seed, out=out)


def _controllers(args, run, with_baseline: bool) -> dict:
    specs = dict(run.eval.controllers or {})
    for text in args.controller:
        name, path = _controller_arg(text)
        specs[name] = "novsl" if path == "novsl" else str(Path(path).resolve())
    if with_baseline and not any(v == "novsl" for v in specs.values()):
        specs = {"NoVSL": "novsl", **specs}
    return specs


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = _run_config(args)
        if args.command == "train":
            if args.agent:
                run.train.agent = args.agent
            if args.reward:
                run.train.reward = args.reward
            if args.episodes is not None:
                run.train.episodes = args.episodes
            res = harness.cmd_train(run)
            print(f"trained {run.train.agent}/{run.train.reward} for {len(res.returns)} episodes -> "
                  f"{run.out_dir / 'checkpoint'}")
        elif args.command == "eval":
            if args.episodes is not None:
                run.eval.episodes = args.episodes
            if args.workers is not None:
                run.eval.workers = args.workers
            report = harness.cmd_eval(run, _controllers(args, run, not args.no_baseline))
            for name, m in report.means().items():
                print(f"{name:>16}  ATT {m['att']:8.1f} s  brakes {m['theta']:7.1f}  r1 {m['r1_flow']:9.1f}")
        elif args.command == "probe":
            specs = _controllers(args, run, with_baseline=False)
            if not specs:
                raise UsageError("probe needs at least one --controller")
            res = harness.cmd_probe(run, specs)
            print(f"probe table for {', '.join(res.limits)} -> {run.out_dir / 'probe'}")
        elif args.command == "report":
            payload = harness.cmd_report(run, [str(Path(e).resolve()) for e in args.evals])
            print(payload["text"], end="")
        elif args.command == "demo":
            from .demo import run_demo
            run_demo(run)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ShapeError, CorruptFileError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

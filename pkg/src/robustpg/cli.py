"""Command-line entry point: ``python3 -m robustpg <command>``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from . import harness
from .fixtures import BUILTINS, builtin
from .mdp import CapExceeded

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robustpg", description="Robust policy-gradient experiments on tabular MDPs.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment config")
    run.add_argument("config")
    run.add_argument("--workers", type=int, default=1, help="parallel seed workers")

    sweep = sub.add_parser("sweep", help="sweep the attack magnitude delta")
    sweep.add_argument("config")
    sweep.add_argument("--deltas", type=float, nargs="+", required=True)
    sweep.add_argument("--seeds", type=int, nargs="+", help="override seeds (default: 3 seeds 0 1 2)")
    sweep.add_argument("--workers", type=int, default=1)

    ev = sub.add_parser("eval", help="exact value of a softmax-linear policy")
    ev.add_argument("fixture", help="builtin name or .mdp file")
    ev.add_argument("theta_file", help="whitespace-separated parameters")

    fx = sub.add_parser("fixtures", help="fixture utilities")
    fx_sub = fx.add_subparsers(dest="fixtures_command", required=True)
    fx_sub.add_parser("list", help="list builtin fixtures")
    return p


def _cmd_run(args) -> int:
    cfg = harness.load_config(args.config)
    records = harness.run_experiment(cfg, workers=args.workers)
    summary = harness.summarize(records)
    out = harness.output_root(cfg) / cfg.name
    print(f"wrote {out / 'records.csv'} ({len(records)} rows)")
    print(json.dumps(summary.get("mean", {}), indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = harness.load_config(args.config)
    seeds = tuple(args.seeds) if args.seeds else (0, 1, 2)
    cfg = replace(cfg, seeds=seeds)
    rows = harness.sweep_delta(cfg, args.deltas, workers=args.workers)
    sys.stdout.write(harness.sweep_csv(rows))
    return EXIT_OK


def _cmd_eval(args) -> int:
    try:
        theta = np.loadtxt(args.theta_file, dtype=float, ndmin=1)
    except (OSError, ValueError) as exc:
        raise harness.ConfigError("theta_file", str(exc)) from None
    try:
        result = harness.evaluate_theta(args.fixture, theta)
    except KeyError as exc:
        raise harness.ConfigError("fixture", str(exc.args[0])) from None
    except OSError as exc:
        raise harness.ConfigError("fixture", str(exc)) from None
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_fixtures(args) -> int:
    for name in BUILTINS:
        fx = builtin(name)
        m = fx.mdp
        print(f"{name}\tstates={m.n_states}\tactions={m.n_actions}\tdiscount={m.discount}\treset={fx.reset}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handlers = {"run": _cmd_run, "sweep": _cmd_sweep, "eval": _cmd_eval, "fixtures": _cmd_fixtures}
    try:
        return handlers[args.command](args)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CapExceeded, RuntimeError, ValueError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

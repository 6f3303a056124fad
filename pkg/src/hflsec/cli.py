"""Command line entry point: ``hflsec run|sweep|validate``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, load_config, with_overrides
from .runner import env_workers, load_sweep, run_scenario, run_sweep


def _load(path: str, seed: int | None = None, out: str | None = None):
    cfg = load_config(path)
    over = {}
    if seed is not None:
        over["seed"] = seed
    if out is not None:
        over["out"] = out
    return with_overrides(cfg, over) if over else cfg


def cmd_run(args) -> int:
    cfg = _load(args.config, args.seed, args.out)
    out = cfg.out or "runs/latest"
    report = run_scenario(cfg, out_dir=out, workers=args.workers or cfg.workers or env_workers())
    print(json.dumps({"out": out, **report.summary}, sort_keys=True, default=str))
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args.config, out=args.out)
    sweep = load_sweep(args.sweep)
    out = cfg.out or "runs/sweep"
    result = run_sweep(cfg, sweep, out_dir=out, workers=args.workers or cfg.workers or env_workers())
    print(result.summary_csv(), end="")
    for err in result.errors:
        print(f"cell {err['cell_id']} seed {err['seed']} failed: {err['error']}", file=sys.stderr)
    return 0 if result.ok else 1


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hflsec", description="Hierarchical federated learning security experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("--config", required=True, help="config file or preset name")
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.add_argument("--workers", type=int)
    run.set_defaults(func=cmd_run)

    sw = sub.add_parser("sweep", help="run a sweep matrix")
    sw.add_argument("--config", required=True)
    sw.add_argument("--sweep", required=True, help="YAML with axes and seeds")
    sw.add_argument("--out")
    sw.add_argument("--workers", type=int)
    sw.set_defaults(func=cmd_sweep)

    val = sub.add_parser("validate", help="check a config and print it with defaults filled")
    val.add_argument("--config", required=True)
    val.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``fedrecsim run|grid|check``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, apply_overrides, decode_value, parse_config
from .runner import run_grid


def _load(path: Path, args) -> RunConfig:
    cfg = parse_config(path.read_text())
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = args.out
    for pair in args.set or []:
        key, sep, raw = pair.partition("=")
        if not sep:
            raise ConfigError(pair, "--set expects key=value")
        over[key.strip()] = decode_value(raw)
    if not cfg.name and "name" not in over:
        over["name"] = path.stem
    return apply_overrides(cfg, over)


def cmd_run(args) -> int:
    configs = [_load(Path(p), args) for p in args.configs]
    status, _ = run_grid(configs)
    return status


def cmd_grid(args) -> int:
    root = Path(args.dir)
    paths = sorted(root.glob("*.conf"))
    if not paths:
        print(f"no *.conf files in {root}", file=sys.stderr)
        return 2
    configs = [_load(p, args) for p in paths]
    status, _ = run_grid(configs)
    return status


def cmd_check(args) -> int:
    from .checks import run_all
    results = run_all(seed=args.seed or 0)
    for r in results:
        print(r.line())
    return 0 if all(r.ok for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedrecsim", description="Federated recommender poisoning simulator.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for per-epoch logs, -vv for debug")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the master seed")
    common.add_argument("--out", default=None, help="override the output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="run one or more config files")
    r.add_argument("configs", nargs="+")
    r.set_defaults(func=cmd_run)
    g = sub.add_parser("grid", parents=[common], help="run every *.conf file in a directory")
    g.add_argument("dir")
    g.set_defaults(func=cmd_grid)
    c = sub.add_parser("check", help="gradient and invariant self-checks")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

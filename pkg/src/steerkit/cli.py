"""Command-line entry point: `steerkit {gen,collect,train,detect,steer,report,run}`.

Exit status: 0 ok, 1 run error, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig
from .errors import InvalidConfig, SteerkitError
from .pipeline import STAGES, run_stages

EXIT_OK, EXIT_ERROR, EXIT_CONFIG = 0, 1, 2


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="steerkit", description="Planted-concept benchmark for concept detection and steering.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "run"):
        sp = sub.add_parser(name, help="all stages" if name == "run" else f"{name} stage")
        sp.add_argument("--config", help="run config JSON (defaults to the built-in desk config)")
        sp.add_argument("--seed", type=_u64, help="override the config seed")
        sp.add_argument("--out", help="override the output directory")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes for per-concept training")
        sp.add_argument("--judge-endpoint", help="HTTP judge service; the mock judge is used when absent")
    return p


def load_config(args) -> RunConfig:
    saved = Path(args.out or RunConfig.out) / "config.json"
    if args.config:
        cfg = RunConfig.load(args.config, seed=args.seed, out=args.out)
    elif args.command not in ("gen", "run") and saved.exists():
        # later stages reuse the config that gen recorded
        cfg = RunConfig.load(saved, seed=args.seed, out=args.out)
    else:
        cfg = RunConfig()
        cfg = replace(cfg, seed=cfg.seed if args.seed is None else args.seed, out=args.out or cfg.out)
    if args.judge_endpoint:
        cfg = replace(cfg, judge_endpoint=args.judge_endpoint)
    if args.jobs < 1:
        raise InvalidConfig("--jobs must be >= 1")
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        cfg = load_config(args)
    except InvalidConfig as exc:
        print(f"steerkit: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    stages = STAGES if args.command == "run" else (args.command,)
    try:
        run_stages(cfg, stages, args.jobs)
    except SteerkitError as exc:
        print(f"steerkit: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # pragma: no cover - unexpected failures still map to 1
        print(f"steerkit: unexpected {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(f"steerkit: {args.command} finished; artifacts in {cfg.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""``bljust run --mode MODE [--config PATH] [--set key=value ...] --out DIR``"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .experiments import MODES, ConfigError, apply_overrides, load_config, resolve, run_experiment

EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bljust", description="Penalized bilevel training experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--mode", required=True, help=f"one of: {', '.join(MODES)}")
    run.add_argument("--config", type=Path, default=None, help="YAML or JSON config file")
    run.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                     help="dotted override, e.g. train.alpha=1e-3 (repeatable; wins over --config)")
    run.add_argument("--out", type=Path, required=True, help="output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.mode not in MODES:
        print(f"bljust: unknown mode {args.mode!r}; valid modes: {', '.join(MODES)}", file=sys.stderr)
        return EXIT_USAGE
    try:
        partial = load_config(args.config) if args.config is not None else {}
        cfg = resolve(apply_overrides(partial, args.overrides))
    except (ConfigError, OSError) as exc:
        print(f"bljust: invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.json").write_text(json.dumps({"mode": args.mode, **cfg}, indent=2, sort_keys=True) + "\n")
    try:
        run_experiment(args.mode, cfg, args.out)
    except Exception as exc:  # error.json already written
        print(f"bljust: {args.mode} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

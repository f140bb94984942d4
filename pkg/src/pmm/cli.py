"""Command-line front end: run experiment presets, list them, inspect runs."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .errors import PmmError
from .experiments import (
    config_from_dict,
    list_presets,
    load_config,
    preset_config,
    run_experiment,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pmm",
        description="Parametric matrix model experiments",
    )
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute one experiment")
    run.add_argument("--config", metavar="PATH",
                     help="JSON experiment config file")
    run.add_argument("--preset", metavar="NAME",
                     help="bundled preset name (see `pmm list`)")
    run.add_argument("--seed", metavar="K", type=int, default=None,
                     help="override the config's seed list with this one seed")
    run.add_argument("--out", metavar="DIR", default=None,
                     help="override the output directory")

    sub.add_parser("list", help="list bundled preset names")

    inspect = sub.add_parser("inspect", help="summarize a finished run")
    inspect.add_argument("path", metavar="PATH",
                         help="run directory or manifest.json")
    return parser


def _cmd_run(args) -> int:
    if bool(args.config) == bool(args.preset):
        print("run needs exactly one of --config or --preset", file=sys.stderr)
        return 2
    if args.config:
        config = load_config(args.config)
        overrides = {}
        if args.seed is not None:
            overrides["seeds"] = [args.seed]
        if args.out is not None:
            overrides["out_dir"] = args.out
        if overrides:
            raw = config.as_dict()
            raw.update(overrides)
            config = config_from_dict(raw)
    else:
        config = preset_config(
            args.preset,
            seeds=[args.seed] if args.seed is not None else None,
            out_dir=args.out,
        )
    manifest = run_experiment(config)
    print(f"preset:      {manifest.preset}")
    print(f"config hash: {manifest.config_hash}")
    print(f"best seed:   {manifest.best_seed}")
    print(f"wall clock:  {manifest.wall_clock_seconds:.1f}s")
    for row in manifest.per_seed_metrics:
        if row.get("seed") == manifest.best_seed:
            for key, value in row.items():
                if key != "seed":
                    print(f"  {key}: {value}")
    print(f"manifest:    {os.path.join(config.out_dir, 'manifest.json')}")
    return 0


def _cmd_list() -> int:
    for name in list_presets():
        print(name)
    return 0


def _cmd_inspect(path: str) -> int:
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    print(f"preset:      {manifest.get('preset')}")
    print(f"config hash: {manifest.get('config_hash')}")
    print(f"code:        {manifest.get('code_version')}")
    print(f"wall clock:  {manifest.get('wall_clock_seconds', 0.0):.1f}s")
    if manifest.get("failed_stage"):
        print(f"FAILED at stage: {manifest['failed_stage']}")
        print(f"  {manifest.get('error')}")
    print(f"best seed:   {manifest.get('best_seed')}")
    for row in manifest.get("per_seed_metrics", []):
        marker = "*" if row.get("seed") == manifest.get("best_seed") else " "
        metrics = ", ".join(f"{k}={v}" for k, v in row.items() if k != "seed")
        print(f" {marker} seed {row.get('seed')}: {metrics}")
    for artifact in manifest.get("artifacts", []):
        print(f"  artifact: {artifact}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "list":
            return _cmd_list()
        return _cmd_inspect(args.path)
    except PmmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())

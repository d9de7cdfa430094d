"""Command-line entry point: ``swarmcbf run | compare | presets``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import scenarios
from .errors import SwarmCBFError


def _run(args) -> int:
    def progress(k, diag):
        if not args.quiet and k % 50 == 0:
            print(f"step {k}  t={diag['t']:.4g}", file=sys.stderr, flush=True)

    rep = scenarios.run(args.config, out=args.out, seed=args.seed, preset_name=args.preset, progress=progress)
    print(f"wrote {rep.out_dir}")
    for k, v in rep.final.items():
        print(f"  {k}: {scenarios._short(v)}")
    for name, v in rep.violations.items():
        if v.get("violated"):
            print(f"constraint violated beyond tolerance: {name} {v}", file=sys.stderr)
    return rep.exit_code


def _compare(args) -> int:
    summary = scenarios.compare(args.dir_a, args.dir_b, out=args.out)
    print(scenarios.format_compare(summary))
    return scenarios.EXIT_OK


def _presets(args) -> int:
    if args.action == "list":
        for name in scenarios.preset_names():
            print(f"{name:<26} {scenarios.PRESETS[name].get('description', '')}")
    else:
        if not args.name:
            raise scenarios.ConfigError("presets show needs a preset name")
        print(scenarios.preset(args.name).dump(), end="")
    return scenarios.EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swarmcbf", description="Safety-filtered swarm density steering scenarios.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario file and/or a preset")
    r.add_argument("config", nargs="?", help="YAML scenario file (overrides preset keys when both are given)")
    r.add_argument("--out", help="output directory")
    r.add_argument("--seed", type=int, help="override the config seed")
    r.add_argument("--preset", help="built-in preset name (see 'presets list')")
    r.add_argument("-q", "--quiet", action="store_true", help="no progress lines")
    r.set_defaults(func=_run)

    c = sub.add_parser("compare", help="compare two run directories")
    c.add_argument("dir_a")
    c.add_argument("dir_b")
    c.add_argument("--out", help="write compare.json and overlay plots here")
    c.set_defaults(func=_compare)

    ps = sub.add_parser("presets", help="list or print built-in presets")
    ps.add_argument("action", choices=("list", "show"))
    ps.add_argument("name", nargs="?")
    ps.set_defaults(func=_presets)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SwarmCBFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return scenarios.EXIT_ERROR
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        logging.getLogger("swarmcbf").debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return scenarios.EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

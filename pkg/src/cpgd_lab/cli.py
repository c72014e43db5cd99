"""Command-line entry point: ``cpgd-lab run|verify|list-scenarios``."""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError
from .scenarios import SCENARIOS, UnknownScenario, run_scenario


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpgd-lab", description="Desk-scale clipped policy-gradient lab.")
    parser.add_argument("-q", "--quiet", action="store_true", help="suppress per-run progress lines")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a named scenario")
    run.add_argument("scenario")
    run.add_argument("--config", metavar="PATH", help="INI file with [task]/[policy]/[loss]/[train]/[collapse] keys")
    run.add_argument("--set", dest="overrides", metavar="KEY=VALUE", action="append", default=[],
                     help="override one key (section.key or an unambiguous bare key); repeatable")
    run.add_argument("--seeds", type=_seeds, metavar="A,B,C")
    run.add_argument("--out", metavar="DIR", help="output directory (default: runs/<scenario>)")

    verify = sub.add_parser("verify", help="run the oracle verification suite")
    verify.add_argument("--out", metavar="DIR", default="runs/verify")

    sub.add_parser("list-scenarios", help="list available scenarios")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    log = None if args.quiet else print
    if args.command == "list-scenarios":
        for s in SCENARIOS.values():
            print(f"{s.name:20s} {s.description}")
        return 0
    try:
        if args.command == "verify":
            return run_scenario("verify", args.out, log=log)
        out = args.out or f"runs/{args.scenario}"
        return run_scenario(args.scenario, out, args.config, args.overrides, args.seeds, log=log)
    except UnknownScenario as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

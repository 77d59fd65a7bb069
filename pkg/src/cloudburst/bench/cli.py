"""``cloudburst`` command line: run, sweep, loopback-bench, summarize."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import ScenarioError, bundled_scenarios, load
from .runner import loopback_bench, run_scenario, summarize_dir, sweep

EXIT_OK, EXIT_CONFIG, EXIT_USAGE = 0, 2, 64


def _overrides(args) -> dict:
    out = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if args.duration is not None:
        out["duration"] = args.duration
    if args.rate is not None:
        out["workload.rate"] = args.rate
    if args.scheme is not None:
        out["scheme.name"] = args.scheme
    for item in args.set or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ScenarioError("--set", [(item, None, "expected KEY=VALUE")])
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _scenario_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", required=True,
                   help="scenario TOML, run manifest.json, or a bundled scenario name")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--out", type=Path, help="output directory (default: runs/<name>)")
    p.add_argument("--duration", type=float, help="seconds of offered load")
    p.add_argument("--rate", type=float, help="requests per second per server")
    p.add_argument("--scheme", choices=["A", "B", "C", "D", "DCTCP"])
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted-path override, value parsed as JSON when possible")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cloudburst", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="simulate one scenario")
    _scenario_flags(p)

    p = sub.add_parser("sweep", help="run a scenario across values of one parameter")
    _scenario_flags(p)
    p.add_argument("--param", help="dotted parameter path (default: the scenario's [sweep])")
    p.add_argument("--values", help="JSON list of values")
    p.add_argument("--workers", type=int, help="parallel runs (default: CPU count)")

    p = sub.add_parser("loopback-bench", help="measure codec cost and loopback latency")
    p.add_argument("--sizes", default="5000,10000,20000,50000,93000",
                   help="comma separated message sizes in bytes")
    p.add_argument("--drop-rate", type=float, default=0.0)
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--paths", type=int, default=4)
    p.add_argument("--no-e2e", action="store_true", help="skip the socket round trips")
    p.add_argument("--out", type=Path, help="CSV output (default: stdout)")

    p = sub.add_parser("summarize", help="recompute summaries from a trace")
    p.add_argument("trace", type=Path, help="trace.csv or a run directory")
    p.add_argument("--out", type=Path, help="write summary.csv and percentiles.txt here")

    sub.add_parser("scenarios", help="list bundled scenarios")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.cmd == "run":
            sc = load(args.scenario)
            ov = _overrides(args)
            if ov:
                sc = sc.with_overrides(ov)
            out = args.out or Path("runs") / sc.name
            run_scenario(sc, out)
            print((out / "percentiles.txt").read_text(), end="")
            print(f"artifacts: {out}")
        elif args.cmd == "sweep":
            sc = load(args.scenario)
            ov = _overrides(args)
            if ov:
                sc = sc.with_overrides(ov)
            param = args.param or (sc.sweep.param if sc.sweep else None)
            if args.values is not None:
                try:
                    values = json.loads(args.values)
                except json.JSONDecodeError as exc:
                    parser.error(f"--values is not JSON: {exc}")
                if not isinstance(values, list):
                    parser.error("--values must be a JSON list")
            else:
                values = sc.sweep.values if sc.sweep else None
            if not param or not values:
                parser.error("sweep needs --param/--values or a [sweep] table in the scenario")
            out = args.out or Path("runs") / f"{sc.name}-sweep"
            target = sweep(param, values, sc, out, workers=args.workers)
            print(target.read_text(), end="")
            print(f"artifacts: {out}")
        elif args.cmd == "loopback-bench":
            try:
                sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
            except ValueError:
                parser.error("--sizes must be comma separated integers")
            text = loopback_bench(sizes, args.drop_rate, repeats=args.repeats, seed=args.seed,
                                  num_paths=args.paths, e2e=not args.no_e2e, out=args.out)
            if args.out is None:
                print(text, end="")
        elif args.cmd == "summarize":
            if not args.trace.exists():
                print(f"error: {args.trace} does not exist", file=sys.stderr)
                return EXIT_USAGE
            print(summarize_dir(args.trace, args.out), end="")
        elif args.cmd == "scenarios":
            for name, path in bundled_scenarios().items():
                sc = load(path)
                print(f"{name:<16} {sc.description}")
    except ScenarioError as exc:
        print(f"error: invalid scenario\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

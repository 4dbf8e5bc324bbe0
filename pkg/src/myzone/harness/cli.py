"""``myzone`` command-line driver.

Subcommands::

    myzone validate SCENARIO
    myzone run SCENARIO [--seed N] [--out DIR]
    myzone metrics SESSIONS [--scenario S] [--start MS --end MS] [--action A]
    myzone report SCENARIO --out DIR [--sessions FILE]
    myzone probe-model --r R --m M --p-on P [--friends N] [--trials T] [--seed N]
    myzone generate {pair,social,scaled} --out FILE [--seed N]

Exit status: 0 on success, 2 for an invalid scenario, 3 for I/O errors,
1 for any other protocol error. Failures print ``<ErrorClass>: message`` on
stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from ..errors import IoFailure, MyZoneError, ScenarioInvalid
from ..sessionlog import Action
from . import metrics, report, scenario as scen
from .world import run

log = logging.getLogger("myzone")

EXIT_OK, EXIT_ERROR, EXIT_INVALID, EXIT_IO = 0, 1, 2, 3


def _load(path: str, seed: Optional[int]) -> scen.Scenario:
    sc = scen.load(path)
    return dataclasses.replace(sc, seed=seed) if seed is not None else sc


def cmd_validate(args) -> int:
    sc = scen.load(args.scenario)
    print(f"ok: {sc.name} ({len(sc.users)} users, {len(sc.edges)} edges, {sc.days} days)")
    return EXIT_OK


def cmd_run(args) -> int:
    sc = _load(args.scenario, args.seed)
    result = run(sc)
    paths = report.write_report(args.out, result.log, sc, result.stats.to_dict())
    summary = report.load_summary(paths[report.SUMMARY])
    print(json.dumps({"sessions": summary["sessions"], "success_ratio": summary["success_ratio"]["all"],
                      "out": str(args.out)}, sort_keys=True))
    return EXIT_OK


def cmd_metrics(args) -> int:
    entries = report.load_sessions(args.sessions)
    window = None
    if args.start is not None or args.end is not None:
        window = (args.start or 0, args.end if args.end is not None else max((e.end_ms for e in entries), default=0) + 1)
    actions = (Action(args.action),) if args.action else metrics.USER_ACTIONS
    out = {"success_ratio": metrics.success_ratio(entries, window, actions),
           "impact_mirror": metrics.impact_ratio(entries, metrics.MIRROR, window=window, actions=actions).get("all"),
           "impact_device": metrics.impact_ratio(entries, metrics.DEVICE, window=window, actions=actions).get("all")}
    if args.scenario:
        sc = scen.load(args.scenario)
        out["groups"] = metrics.group_availability(entries, sc.groups, window, actions)
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    sc = _load(args.scenario, args.seed)
    if args.sessions:
        entries = report.load_sessions(args.sessions)
        world = report.load_world(Path(args.sessions).with_name(report.WORLD))
    else:
        result = run(sc)
        entries, world = result.log, result.stats.to_dict()
    report.write_report(args.out, entries, sc, world)
    print(f"report written to {args.out}")
    return EXIT_OK


def cmd_probe_model(args) -> int:
    stats = report.guard_statistics({"r": args.r, "m": args.m, "p_on": args.p_on, "friends": args.friends,
                                     "trials": args.trials}, args.seed)
    print(f"{'n':>3} {'model':>9} {'empirical':>9}")
    for i, (a, b) in enumerate(zip(stats["model"], stats["empirical"]), 1):
        print(f"{i:>3} {a:9.5f} {b:9.5f}")
    print(f"expected runs {stats['expected_runs']:.4f}  mean runs {stats['mean_runs']:.4f}  "
          f"max gap {stats['max_gap']:.4f}")
    return EXIT_OK


def cmd_generate(args) -> int:
    makers = {"pair": lambda: scen.pair_scenario(seed=args.seed),
              "social": lambda: scen.social_scenario(seed=args.seed),
              "scaled": lambda: scen.scaled_paper_scenario(seed=args.seed)}
    sc = makers[args.kind]()
    scen.dump(sc, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="myzone", description="Simulation harness for the MyZone protocols.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", help="check a scenario file")
    s.add_argument("scenario")
    s.set_defaults(fn=cmd_validate)

    s = sub.add_parser("run", help="simulate a scenario and write a report")
    s.add_argument("scenario")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="out")
    s.set_defaults(fn=cmd_run)

    s = sub.add_parser("metrics", help="compute ratios from a sessions file")
    s.add_argument("sessions")
    s.add_argument("--scenario")
    s.add_argument("--start", type=int)
    s.add_argument("--end", type=int)
    s.add_argument("--action", choices=[a.value for a in Action])
    s.set_defaults(fn=cmd_metrics)

    s = sub.add_parser("report", help="write report files (from a sessions file, or by running)")
    s.add_argument("scenario")
    s.add_argument("--sessions")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("probe-model", help="guarded registration: model vs Monte Carlo")
    s.add_argument("--r", type=int, required=True)
    s.add_argument("--m", type=int, required=True)
    s.add_argument("--p-on", type=float, required=True)
    s.add_argument("--friends", type=int, default=3)
    s.add_argument("--trials", type=int, default=10_000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_probe_model)

    s = sub.add_parser("generate", help="write a generated scenario")
    s.add_argument("kind", choices=["pair", "social", "scaled"])
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=1)
    s.set_defaults(fn=cmd_generate)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ScenarioInvalid as exc:
        print(f"ScenarioInvalid: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except IoFailure as exc:
        print(f"IoFailure: {exc}", file=sys.stderr)
        return EXIT_IO
    except MyZoneError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

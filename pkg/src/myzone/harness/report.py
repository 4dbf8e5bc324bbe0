"""Report files written after a run (report schema version 1).

``sessions.jsonl``
    One :class:`SessionLogEntry` per line, compact JSON with sorted keys.
``daily.jsonl``
    One line per virtual day: ``{"day", "sessions", "success_ratio",
    "posting", "update", "groups": {group: ratio}}``; ratios are null for a
    day without sessions.
``summary.json``
    Overall and per-window ratios, group availability before and during
    the takedown, impact tables, relay traffic, T.1 detections, world
    counters, optional guarded-registration statistics, and a SHA-256 of
    the sessions file.

All JSON is written with sorted keys so equal runs give equal bytes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Optional, Union

from ..errors import IoFailure
from ..sessionlog import Action, SessionLogEntry
from . import metrics
from .scenario import Scenario

REPORT_VERSION = 1
SESSIONS = "sessions.jsonl"
DAILY = "daily.jsonl"
SUMMARY = "summary.json"
WORLD = "world.json"


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sessions_text(log: list[SessionLogEntry]) -> str:
    return "".join(e.to_json() + "\n" for e in log)


def parse_sessions(text: str) -> list[SessionLogEntry]:
    return [SessionLogEntry.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]


def daily_records(log: list[SessionLogEntry], scenario: Scenario) -> list[dict]:
    days, day_ms = scenario.days, scenario.day_ms
    overall = metrics.daily_series(log, day_ms, days)
    posting = metrics.daily_series(log, day_ms, days, actions=(Action.POSTING,))
    update = metrics.daily_series(log, day_ms, days, actions=(Action.UPDATE,))
    per_group = {g: metrics.daily_series(log, day_ms, days, targets=set(m)) for g, m in sorted(scenario.groups.items())}
    counts = [0] * days
    for e in log:
        d = e.start_ms // day_ms
        if e.action in metrics.USER_ACTIONS and 0 <= d < days:
            counts[d] += 1
    return [{"day": i + 1, "sessions": counts[i], "success_ratio": overall[i], "posting": posting[i],
             "update": update[i], "groups": {g: s[i] for g, s in per_group.items()}} for i in range(days)]


def guard_statistics(guard: dict, seed: int) -> dict:
    from ..guard import GuardParams, distribution, empirical_distribution, empirical_mean, expected_runs
    from ..guard import simulate_runs
    params = GuardParams(guard.get("friends", 3), guard["m"], guard["r"], guard["p_on"])
    counts = simulate_runs(params, guard["trials"], seed)
    n_max = 10
    model = distribution(params, n_max)
    emp = empirical_distribution(counts, guard["trials"], n_max)
    return {"params": {"r": params.r_total, "m": params.m, "p_on": params.p_on, "friends": params.n},
            "trials": guard["trials"], "model": model, "empirical": emp,
            "max_gap": max(abs(a - b) for a, b in zip(model, emp)),
            "expected_runs": expected_runs(params), "mean_runs": empirical_mean(counts)}


def summarize(log: list[SessionLogEntry], scenario: Scenario, world: Optional[dict] = None) -> dict:
    horizon = scenario.horizon_ms
    windows = {"all": (0, horizon)}
    td = scenario.takedown
    if td:
        windows["before_takedown"] = (0, td["start_ms"])
        windows["during_takedown"] = (td["start_ms"], min(td["end_ms"], horizon))
    ratios = {}
    groups = {}
    for name, w in windows.items():
        ratios[name] = {"overall": metrics.success_ratio(log, w),
                        "posting": metrics.success_ratio(log, w, (Action.POSTING,)),
                        "update": metrics.success_ratio(log, w, (Action.UPDATE,))}
        groups[name] = metrics.group_availability(log, scenario.groups, w)
    impact = {"mirror": metrics.impact_ratio(log, metrics.MIRROR).get("all"),
              "device": metrics.impact_ratio(log, metrics.DEVICE).get("all"),
              "by_mirror_count": {str(k): v for k, v in
                                  metrics.impact_ratio(log, metrics.MIRROR, metrics.by_mirror_count(scenario)).items()},
              "by_device_count": {str(k): v for k, v in
                                  metrics.impact_ratio(log, metrics.DEVICE, metrics.by_device_count(scenario)).items()},
              "by_rank": {str(k): v for k, v in metrics.rank_shares(log, metrics.mirrors_of(scenario)).items()}}
    text = sessions_text(log)
    out = {"version": REPORT_VERSION, "scenario": scenario.name, "seed": scenario.seed,
           "scenario_sha256": hashlib.sha256(scenario.to_json().encode()).hexdigest(),
           "sessions": len(log), "sessions_sha256": hashlib.sha256(text.encode()).hexdigest(),
           "success_ratio": ratios, "group_availability": groups, "impact_ratio": impact,
           "world": world, "guard": guard_statistics(scenario.guard, scenario.seed) if scenario.guard else None}
    if world is not None:
        out["relay_bytes"] = world.get("relay_bytes")
        out["t1_events"] = world.get("t1_events")
    return out


def write_report(out_dir: Union[str, Path], log: list[SessionLogEntry], scenario: Scenario,
                 world: Optional[dict] = None) -> dict[str, Path]:
    """Write sessions, daily series and summary; returns the paths written."""
    base = Path(out_dir)
    files = {SESSIONS: sessions_text(log),
             DAILY: "".join(_dumps(r) + "\n" for r in daily_records(log, scenario)),
             SUMMARY: json.dumps(summarize(log, scenario, world), sort_keys=True, indent=1) + "\n"}
    if world is not None:
        files[WORLD] = _dumps(world) + "\n"
    paths = {}
    try:
        base.mkdir(parents=True, exist_ok=True)
        for name in sorted(files):
            (base / name).write_text(files[name])
            paths[name] = base / name
    except OSError as exc:
        raise IoFailure(f"cannot write report to {base}: {exc}") from exc
    return paths


def _read(path: Path) -> str:
    try:
        return path.read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def load_sessions(path: Union[str, Path]) -> list[SessionLogEntry]:
    return parse_sessions(_read(Path(path)))


def load_summary(path: Union[str, Path]) -> dict:
    return json.loads(_read(Path(path)))


def load_daily(path: Union[str, Path]) -> list[dict]:
    return [json.loads(line) for line in _read(Path(path)).splitlines() if line.strip()]


def load_world(path: Union[str, Path]) -> Optional[dict]:
    p = Path(path)
    return json.loads(_read(p)) if p.exists() else None

"""Availability metrics over session logs.

Success ratio: successful sessions over all sessions, where a failed session
and the failures that directly follow it for the same (client, action,
target) count once. A success is always counted.

Impact ratio: among successful sessions, the fraction served by a mirror
(``serving != target``) or, in the device variant, by one of the target's
non-primary devices (``serving == target`` and priority >= 1).

Both read Posting and Update sessions unless told otherwise; replica sync
sessions are bookkeeping, not user-visible availability.
"""

from __future__ import annotations

from collections import defaultdict
from typing import Callable, Iterable, Optional

from ..sessionlog import Action, SessionLogEntry

USER_ACTIONS = (Action.POSTING, Action.UPDATE)
MIRROR = "mirror"
DEVICE = "device"


def collapse_retries(log: Iterable[SessionLogEntry]) -> list[tuple[SessionLogEntry, bool]]:
    """Pair each entry with whether it counts (False for a failure right after a failure)."""
    last_failed: set = set()
    out = []
    for e in log:
        key = (e.client, e.action, e.target)
        if e.ok:
            last_failed.discard(key)
            out.append((e, True))
        else:
            out.append((e, key not in last_failed))
            last_failed.add(key)
    return out


def _in_window(e: SessionLogEntry, window: Optional[tuple[int, int]]) -> bool:
    return window is None or window[0] <= e.start_ms < window[1]


def success_counts(log: Iterable[SessionLogEntry], window: Optional[tuple[int, int]] = None,
                   actions=USER_ACTIONS, targets: Optional[set] = None) -> tuple[int, int]:
    """``(successes, counted sessions)`` after retry collapse."""
    ok = total = 0
    for e, counts in collapse_retries(x for x in log if x.action in actions):
        if not counts or not _in_window(e, window) or (targets is not None and e.target not in targets):
            continue
        total += 1
        ok += e.ok
    return ok, total


def success_ratio(log: Iterable[SessionLogEntry], window: Optional[tuple[int, int]] = None,
                  actions=USER_ACTIONS, targets: Optional[set] = None) -> Optional[float]:
    """Collapsed success ratio; None when the window holds no sessions."""
    ok, total = success_counts(log, window, actions, targets)
    return ok / total if total else None


def _impacted(e: SessionLogEntry, variant: str) -> bool:
    if variant == MIRROR:
        return e.serving != e.target
    if variant == DEVICE:
        return e.serving == e.target and e.serving_priority >= 1
    raise ValueError(f"unknown impact variant {variant!r}")


def impact_ratio(log: Iterable[SessionLogEntry], variant: str = MIRROR,
                 key: Optional[Callable[[SessionLogEntry], object]] = None,
                 window: Optional[tuple[int, int]] = None, actions=USER_ACTIONS) -> dict:
    """Per-group impact ratio; ``key`` maps an entry to its group (default: one group "all")."""
    hit: dict = defaultdict(int)
    ok: dict = defaultdict(int)
    for e in log:
        if e.action not in actions or not e.ok or not _in_window(e, window):
            continue
        g = "all" if key is None else key(e)
        ok[g] += 1
        hit[g] += _impacted(e, variant)
    return {g: hit[g] / ok[g] for g in sorted(ok, key=str)}


def rank_shares(log: Iterable[SessionLogEntry], mirrors_of: dict[str, list[str]],
                window: Optional[tuple[int, int]] = None, actions=USER_ACTIONS) -> dict:
    """Fraction of successful sessions toward mirrored users served by the rank-k mirror."""
    served: dict = defaultdict(int)
    total = 0
    for e in log:
        ranked = mirrors_of.get(e.target)
        if not ranked or e.action not in actions or not e.ok or not _in_window(e, window):
            continue
        total += 1
        if e.serving in ranked:
            served[ranked.index(e.serving) + 1] += 1
    return {r: served[r] / total for r in sorted(served)} if total else {}


def by_mirror_count(scenario) -> Callable[[SessionLogEntry], int]:
    counts = {u.name: len(u.mirrors) for u in scenario.users}
    return lambda e: counts.get(e.target, 0)


def by_device_count(scenario) -> Callable[[SessionLogEntry], int]:
    counts = {u.name: len(u.devices) for u in scenario.users}
    return lambda e: counts.get(e.target, 1)


def mirrors_of(scenario) -> dict[str, list[str]]:
    return {u.name: [m.name for m in sorted(u.mirrors, key=lambda m: m.rank)] for u in scenario.users}


def daily_series(log: list[SessionLogEntry], day_ms: int, days: int, actions=USER_ACTIONS,
                 targets: Optional[set] = None) -> list[Optional[float]]:
    """Success ratio for each day (index 0 = day 1)."""
    collapsed = collapse_retries(x for x in log if x.action in actions)
    ok = [0] * days
    total = [0] * days
    for e, counts in collapsed:
        if not counts or (targets is not None and e.target not in targets):
            continue
        day = e.start_ms // day_ms
        if 0 <= day < days:
            total[day] += 1
            ok[day] += e.ok
    return [ok[i] / total[i] if total[i] else None for i in range(days)]


def group_availability(log: list[SessionLogEntry], groups: dict[str, list[str]],
                       window: Optional[tuple[int, int]] = None, actions=USER_ACTIONS) -> dict:
    """Success ratio of sessions toward each group's members."""
    return {g: success_ratio(log, window, actions, set(members)) for g, members in sorted(groups.items())}

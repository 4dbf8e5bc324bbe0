"""Scenario schema, validation and generators.

A scenario is a JSON object (schema version 1)::

    {
      "version": 1, "name": "demo", "seed": 7, "crypto": "toy",
      "days": 2, "day_ms": 86400000,
      "intervals": {"registration_ms": 120000, "refresh_ms": 1800000,
                    "sync_ms": 300000, "relay_heartbeat_ms": 60000},
      "activity": {"posts_per_user_day": 4.0, "friend_post_ratio": 0.3,
                   "comment_ratio": 0.3, "zone_share": 0.3, "pull_fanout": 0},
      "relays": {"count": 2, "capacity": 20},
      "takedown": {"start_ms": 100000, "end_ms": 200000} | null,
      "users": [{"name": "alice",
                 "zones": {"family": ["bob"]},
                 "mirrors": [{"name": "carol", "rank": 1, "capacity": null}],
                 "devices": [{"priority": 0, "nat": "Symmetric",
                              "online": "always" | [[start_ms, end_ms], ...]}]}],
      "edges": [["alice", "bob"]],
      "groups": {"label": ["alice", ...]},
      "drain": false,
      "guard": {"r": 20, "m": 6, "p_on": 0.8, "trials": 2000, "friends": 3} | null
    }

Online schedules are step functions: a device is online on each half-open
``[start, end)`` interval. ``pull_fanout`` 0 means every refresh pulls from
every friend; otherwise that many friends are drawn per refresh. ``drain``
adds a final pull round at the end of the run. ``guard`` asks the report to
include guarded-registration run statistics (model vs Monte Carlo).
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Any, Optional, Union

from ..errors import IoFailure, ScenarioInvalid
from ..netsim import NatType

SCHEMA_VERSION = 1
DAY_MS = 86_400_000
ALWAYS = "always"

DEFAULT_INTERVALS = {"registration_ms": 120_000, "refresh_ms": 1_800_000, "sync_ms": 300_000,
                     "relay_heartbeat_ms": 60_000}
DEFAULT_ACTIVITY = {"posts_per_user_day": 4.0, "friend_post_ratio": 0.3, "comment_ratio": 0.3, "zone_share": 0.3,
                    "pull_fanout": 0}


@dataclass(frozen=True)
class DeviceSpec:
    priority: int
    nat: NatType
    online: Union[str, tuple]  # ALWAYS or ((start, end), ...)

    def intervals(self, horizon: int) -> list[tuple[int, int]]:
        if self.online == ALWAYS:
            return [(0, horizon)]
        return [(s, min(e, horizon)) for s, e in self.online if s < horizon]

    def online_at(self, t: int) -> bool:
        if self.online == ALWAYS:
            return True
        return any(s <= t < e for s, e in self.online)


@dataclass(frozen=True)
class MirrorSpec:
    name: str
    rank: int
    capacity: Optional[int] = None


@dataclass
class UserSpec:
    name: str
    devices: list
    zones: dict = field(default_factory=dict)
    mirrors: list = field(default_factory=list)


@dataclass
class Scenario:
    name: str
    seed: int
    users: list
    edges: list
    days: int = 1
    day_ms: int = DAY_MS
    crypto: str = "toy"
    intervals: dict = field(default_factory=lambda: dict(DEFAULT_INTERVALS))
    activity: dict = field(default_factory=lambda: dict(DEFAULT_ACTIVITY))
    relays: dict = field(default_factory=lambda: {"count": 2, "capacity": 20})
    takedown: Optional[dict] = None
    groups: dict = field(default_factory=dict)
    drain: bool = False
    guard: Optional[dict] = None
    version: int = SCHEMA_VERSION

    @property
    def horizon_ms(self) -> int:
        return self.days * self.day_ms

    def user(self, name: str) -> UserSpec:
        for u in self.users:
            if u.name == name:
                return u
        raise KeyError(name)

    def friends_of(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {u.name: [] for u in self.users}
        for a, b in self.edges:
            out[a].append(b)
            out[b].append(a)
        return {k: sorted(v) for k, v in out.items()}

    def to_dict(self) -> dict:
        users = []
        for u in self.users:
            users.append({
                "name": u.name,
                "zones": {z: sorted(m) for z, m in sorted(u.zones.items())},
                "mirrors": [{"name": m.name, "rank": m.rank, "capacity": m.capacity} for m in u.mirrors],
                "devices": [{"priority": d.priority, "nat": d.nat.value,
                             "online": d.online if d.online == ALWAYS else [list(iv) for iv in d.online]}
                            for d in u.devices],
            })
        return {"version": self.version, "name": self.name, "seed": self.seed, "crypto": self.crypto,
                "days": self.days, "day_ms": self.day_ms, "intervals": dict(self.intervals),
                "activity": dict(self.activity), "relays": dict(self.relays), "takedown": self.takedown,
                "users": users, "edges": [list(e) for e in self.edges],
                "groups": {k: list(v) for k, v in sorted(self.groups.items())}, "drain": self.drain,
                "guard": self.guard}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


# --- validation ---------------------------------------------------------------------

class _Check:
    def __init__(self):
        self.problems: list[tuple[str, str]] = []

    def fail(self, path: str, msg: str) -> None:
        self.problems.append((path, msg))

    def int_(self, d: dict, key: str, path: str, lo: Optional[int] = None, default: Any = None) -> Optional[int]:
        v = d.get(key, default)
        if isinstance(v, bool) or not isinstance(v, int):
            self.fail(f"{path}.{key}", f"expected an integer, got {v!r}")
            return None
        if lo is not None and v < lo:
            self.fail(f"{path}.{key}", f"must be >= {lo}")
        return v

    def num(self, d: dict, key: str, path: str, lo: float, hi: Optional[float] = None) -> Optional[float]:
        v = d.get(key)
        if isinstance(v, bool) or not isinstance(v, (int, float)) or (isinstance(v, float) and math.isnan(v)):
            self.fail(f"{path}.{key}", f"expected a number, got {v!r}")
            return None
        if v < lo or (hi is not None and v > hi):
            self.fail(f"{path}.{key}", f"must be in [{lo}, {hi if hi is not None else 'inf'}]")
        return float(v)


def validate(data: Any) -> Scenario:
    """Build a :class:`Scenario` or raise ScenarioInvalid listing every problem."""
    c = _Check()
    if not isinstance(data, dict):
        raise ScenarioInvalid([("scenario", "expected a JSON object")])
    version = data.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        c.fail("version", f"unsupported schema version {version!r}")
    name = data.get("name", "scenario")
    if not isinstance(name, str):
        c.fail("name", "expected a string")
    seed = c.int_(data, "seed", "scenario", 0, default=0)
    days = c.int_(data, "days", "scenario", 1, default=1)
    day_ms = c.int_(data, "day_ms", "scenario", 1, default=DAY_MS)
    crypto = data.get("crypto", "toy")
    if crypto not in ("toy", "standard"):
        c.fail("crypto", "must be 'toy' or 'standard'")
    horizon = (days or 1) * (day_ms or DAY_MS)

    intervals = dict(DEFAULT_INTERVALS)
    raw = data.get("intervals", {})
    if not isinstance(raw, dict):
        c.fail("intervals", "expected an object")
        raw = {}
    for k in raw:
        if k not in DEFAULT_INTERVALS:
            c.fail(f"intervals.{k}", "unknown interval")
    intervals.update({k: v for k, v in raw.items() if k in DEFAULT_INTERVALS})
    for k in DEFAULT_INTERVALS:
        c.int_(intervals, k, "intervals", 1)

    activity = dict(DEFAULT_ACTIVITY)
    raw = data.get("activity", {})
    if not isinstance(raw, dict):
        c.fail("activity", "expected an object")
        raw = {}
    for k in raw:
        if k not in DEFAULT_ACTIVITY:
            c.fail(f"activity.{k}", "unknown activity parameter")
    activity.update({k: v for k, v in raw.items() if k in DEFAULT_ACTIVITY})
    c.num(activity, "posts_per_user_day", "activity", 0)
    for k in ("friend_post_ratio", "comment_ratio", "zone_share"):
        c.num(activity, k, "activity", 0, 1)
    c.int_(activity, "pull_fanout", "activity", 0)

    relays = data.get("relays", {"count": 2, "capacity": 20})
    if not isinstance(relays, dict):
        c.fail("relays", "expected an object")
        relays = {"count": 0, "capacity": 1}
    c.int_(relays, "count", "relays", 0)
    c.int_(relays, "capacity", "relays", 1)

    takedown = data.get("takedown")
    if takedown is not None:
        if not isinstance(takedown, dict):
            c.fail("takedown", "expected an object or null")
            takedown = None
        else:
            s = c.int_(takedown, "start_ms", "takedown", 0)
            e = c.int_(takedown, "end_ms", "takedown", 0)
            if s is not None and e is not None and e <= s:
                c.fail("takedown", "end_ms must be after start_ms")

    users: list[UserSpec] = []
    names: set[str] = set()
    raw_users = data.get("users")
    if not isinstance(raw_users, list) or not raw_users:
        c.fail("users", "expected a non-empty list")
        raw_users = []
    for i, u in enumerate(raw_users):
        path = f"users[{i}]"
        if not isinstance(u, dict):
            c.fail(path, "expected an object")
            continue
        uname = u.get("name")
        if not isinstance(uname, str) or not uname or any(ch in uname for ch in "#/\t\n@"):
            c.fail(f"{path}.name", "expected a non-empty name without '#', '/', '@' or whitespace")
            continue
        if uname in names:
            c.fail(f"{path}.name", f"duplicate user {uname!r}")
        names.add(uname)
        devices = []
        prios = set()
        raw_devs = u.get("devices", [{"priority": 0, "nat": "Public", "online": ALWAYS}])
        if not isinstance(raw_devs, list) or not raw_devs:
            c.fail(f"{path}.devices", "expected a non-empty list")
            raw_devs = []
        for j, dv in enumerate(raw_devs):
            dpath = f"{path}.devices[{j}]"
            if not isinstance(dv, dict):
                c.fail(dpath, "expected an object")
                continue
            prio = c.int_(dv, "priority", dpath, 0, default=0)
            if prio is not None and prio > 2:
                c.fail(f"{dpath}.priority", "must be 0, 1 or 2")
            if prio in prios:
                c.fail(f"{dpath}.priority", f"duplicate priority {prio}")
            prios.add(prio)
            try:
                nat = NatType(dv.get("nat", "Public"))
            except ValueError:
                c.fail(f"{dpath}.nat", f"unknown NAT type {dv.get('nat')!r}")
                nat = NatType.PUBLIC
            online = dv.get("online", ALWAYS)
            if online != ALWAYS:
                ok = isinstance(online, list)
                ivs = []
                last = -1
                for k, iv in enumerate(online if ok else []):
                    if (not isinstance(iv, (list, tuple)) or len(iv) != 2
                            or not all(isinstance(x, int) and not isinstance(x, bool) for x in iv)):
                        c.fail(f"{dpath}.online[{k}]", "expected [start_ms, end_ms]")
                        continue
                    s, e = iv
                    if s < 0 or e <= s:
                        c.fail(f"{dpath}.online[{k}]", "need 0 <= start < end")
                    if s < last:
                        c.fail(f"{dpath}.online[{k}]", "intervals must be sorted and disjoint")
                    last = e
                    ivs.append((s, e))
                if not ok:
                    c.fail(f"{dpath}.online", "expected 'always' or a list of intervals")
                online = tuple(ivs)
            devices.append(DeviceSpec(prio if prio is not None else 0, nat, online))
        if prios and 0 not in prios:
            c.fail(f"{path}.devices", "a priority-0 device is required")
        zones = u.get("zones", {})
        if not isinstance(zones, dict):
            c.fail(f"{path}.zones", "expected an object")
            zones = {}
        for z, members in zones.items():
            if z == "All" or z.startswith("@"):
                c.fail(f"{path}.zones.{z}", "reserved zone name")
            if not isinstance(members, list) or not all(isinstance(m, str) for m in members):
                c.fail(f"{path}.zones.{z}", "expected a list of usernames")
        mirrors = []
        raw_m = u.get("mirrors", [])
        if not isinstance(raw_m, list):
            c.fail(f"{path}.mirrors", "expected a list")
            raw_m = []
        for j, m in enumerate(raw_m):
            mpath = f"{path}.mirrors[{j}]"
            if not isinstance(m, dict) or not isinstance(m.get("name"), str):
                c.fail(mpath, "expected an object with a name")
                continue
            rank = c.int_(m, "rank", mpath, 1)
            cap = m.get("capacity")
            if cap is not None and (not isinstance(cap, int) or isinstance(cap, bool) or cap < 0):
                c.fail(f"{mpath}.capacity", "expected null or a non-negative integer")
            mirrors.append(MirrorSpec(m["name"], rank or 1, cap))
        ranks = sorted(m.rank for m in mirrors)
        if ranks != list(range(1, len(ranks) + 1)):
            c.fail(f"{path}.mirrors", "ranks must be consecutive from 1")
        users.append(UserSpec(uname, devices, {z: set(m) for z, m in zones.items() if isinstance(m, list)}, mirrors))

    edges = []
    seen = set()
    raw_edges = data.get("edges", [])
    if not isinstance(raw_edges, list):
        c.fail("edges", "expected a list")
        raw_edges = []
    for i, e in enumerate(raw_edges):
        if not isinstance(e, (list, tuple)) or len(e) != 2 or not all(isinstance(x, str) for x in e):
            c.fail(f"edges[{i}]", "expected [user, user]")
            continue
        a, b = e
        if a == b:
            c.fail(f"edges[{i}]", "self loop")
        for x in (a, b):
            if x not in names:
                c.fail(f"edges[{i}]", f"unknown user {x!r}")
        key = tuple(sorted((a, b)))
        if key in seen:
            c.fail(f"edges[{i}]", "duplicate edge")
        seen.add(key)
        edges.append(key)
    for i, u in enumerate(users):
        for z, members in u.zones.items():
            for m in sorted(members):
                if tuple(sorted((u.name, m))) not in seen:
                    c.fail(f"users[{i}].zones.{z}", f"{m!r} is not a friend of {u.name!r}")
        for j, m in enumerate(u.mirrors):
            if tuple(sorted((u.name, m.name))) not in seen:
                c.fail(f"users[{i}].mirrors[{j}]", f"mirror {m.name!r} must be a friend")
    groups = data.get("groups", {})
    if not isinstance(groups, dict):
        c.fail("groups", "expected an object")
        groups = {}
    for g, members in groups.items():
        if not isinstance(members, list) or any(m not in names for m in members):
            c.fail(f"groups.{g}", "expected a list of known users")
    drain = data.get("drain", False)
    if not isinstance(drain, bool):
        c.fail("drain", "expected a boolean")
    guard = data.get("guard")
    if guard is not None:
        if not isinstance(guard, dict):
            c.fail("guard", "expected an object or null")
            guard = None
        else:
            r = c.int_(guard, "r", "guard", 1)
            m = c.int_(guard, "m", "guard", 0)
            c.num(guard, "p_on", "guard", 0, 1)
            c.int_(guard, "trials", "guard", 1)
            c.int_(guard, "friends", "guard", 1, default=3)
            if r is not None and m is not None and m > r:
                c.fail("guard.m", "cannot exceed r")
    if c.problems:
        raise ScenarioInvalid(c.problems)
    return Scenario(name, seed, users, edges, days, day_ms, crypto, intervals, activity, dict(relays), takedown,
                    {k: list(v) for k, v in groups.items()}, drain, guard, version)


def load(path: Union[str, Path]) -> Scenario:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioInvalid([("scenario", f"not JSON ({exc})")]) from exc
    return validate(data)


def dump(scenario: Scenario, path: Union[str, Path]) -> None:
    try:
        Path(path).write_text(json.dumps(scenario.to_dict(), sort_keys=True, indent=1) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# --- generators -------------------------------------------------------------------------

def churn_schedule(rng: random.Random, horizon: int, mean_on_ms: float, mean_off_ms: float,
                   start_online: Optional[bool] = None) -> tuple:
    """Alternating on/off periods with exponential durations."""
    t = 0
    on = rng.random() < mean_on_ms / (mean_on_ms + mean_off_ms) if start_online is None else start_online
    out = []
    while t < horizon:
        dur = max(60_000, int(rng.expovariate(1.0 / (mean_on_ms if on else mean_off_ms))))
        if on:
            out.append((t, min(t + dur, horizon)))
        t += dur
        on = not on
    return tuple(out)


def random_edges(rng: random.Random, names: list[str], count: int) -> list[tuple[str, str]]:
    pairs = list(combinations(sorted(names), 2))
    if count > len(pairs):
        raise ScenarioInvalid([("edges", f"{count} exceeds the {len(pairs)} possible pairs")])
    return sorted(rng.sample(pairs, count))


def pair_scenario(days: int = 1, seed: int = 1) -> Scenario:
    """Two always-online friends."""
    users = [UserSpec(n, [DeviceSpec(0, NatType.PUBLIC, ALWAYS)]) for n in ("alice", "bob")]
    return Scenario("pair", seed, users, [("alice", "bob")], days=days,
                    intervals={"registration_ms": 120_000, "refresh_ms": 1_800_000, "sync_ms": 300_000,
                               "relay_heartbeat_ms": 60_000})


def social_scenario(users: int = 20, zones: int = 5, days: int = 7, seed: int = 1, degree: float = 0.5,
                    refresh_ms: int = 2 * 3_600_000, posts_per_user_day: float = 6.0) -> Scenario:
    """Always-online users on a random graph with overlapping zones (fault-free)."""
    rng = random.Random(seed)
    names = [f"u{i:02d}" for i in range(users)]
    n_edges = int(degree * users * (users - 1) / 2)
    edges = random_edges(rng, names, n_edges)
    friends = {n: [] for n in names}
    for a, b in edges:
        friends[a].append(b)
        friends[b].append(a)
    specs = []
    for n in names:
        fr = sorted(friends[n])
        zs = {}
        for z in range(zones):
            if fr:
                zs[f"zone{z}"] = set(rng.sample(fr, rng.randrange(1, len(fr) + 1)))
        nat = NatType.SYMMETRIC if rng.random() < 0.5 else NatType.PUBLIC
        specs.append(UserSpec(n, [DeviceSpec(0, nat, ALWAYS)], zs))
    return Scenario(f"social-{users}", seed, specs, edges, days=days,
                    intervals={"registration_ms": 1_800_000, "refresh_ms": refresh_ms, "sync_ms": 3_600_000,
                               "relay_heartbeat_ms": 600_000},
                    activity={"posts_per_user_day": posts_per_user_day, "friend_post_ratio": 0.3,
                              "comment_ratio": 0.3, "zone_share": 0.5, "pull_fanout": 0},
                    relays={"count": 2, "capacity": 20}, drain=True)


def scaled_paper_scenario(seed: int = 1, users: int = 104, edges: int = 5117, days: int = 40,
                          takedown_days: Optional[tuple] = (36, 40), relays: int = 20, relay_capacity: int = 20,
                          symmetric_share: float = 0.93) -> Scenario:
    """Desk-scale counterpart of the 104-user deployment experiment.

    The rendezvous server goes down at the start of day ``takedown_days[0]``
    and stays down through the end of day ``takedown_days[1]``. Users fall
    into groups by how they are replicated:

    * ``no_replica``: one churning device, no mirrors;
    * ``self_replica``: a churning primary plus a mostly-online secondary;
    * ``mirrored``: a churning device, a steady host as rank-1 mirror and a
      churning friend as rank-2 mirror;
    * ``shared_mirror``: three churning users whose only mirror is the same
      never-disconnecting hub;
    * ``hosts``: the hub (never offline) and steady hosts (online about 23
      hours a day) that serve as mirrors.

    Intervals are coarser than the deployment's (registration every 30
    minutes rather than 2) to keep the run short.
    """
    rng = random.Random(seed)
    names = [f"u{i:03d}" for i in range(users)]
    hour = 3_600_000
    horizon = days * DAY_MS
    edge_list = random_edges(rng, names, edges)
    adj = {n: set() for n in names}
    for a, b in edge_list:
        adj[a].add(b)
        adj[b].add(a)

    order = list(names)
    rng.shuffle(order)
    n_hosts = max(3, users // 10)
    hosts = order[:n_hosts]
    hub = hosts[0]
    steady = sorted(hosts[1:])
    rest = order[n_hosts:]
    shared = sorted(n for n in rest if hub in adj[n])[:3]
    rest = [n for n in rest if n not in shared]
    third = len(rest) // 3
    no_replica = sorted(rest[:third])
    self_replica = sorted(rest[third:2 * third])
    mirrored = sorted(rest[2 * third:])
    churners = sorted(no_replica + self_replica + mirrored + shared)

    def nat() -> NatType:
        return NatType.SYMMETRIC if rng.random() < symmetric_share else NatType.FULL_CONE

    def churny() -> tuple:
        return churn_schedule(rng, horizon, 3 * hour, 3 * hour)

    def mostly_on() -> tuple:
        return churn_schedule(rng, horizon, 23 * hour, 1 * hour, start_online=True)

    specs = []
    for n in names:
        mirrors = []
        if n == hub:
            devices = [DeviceSpec(0, nat(), ALWAYS)]
        elif n in steady:
            devices = [DeviceSpec(0, nat(), mostly_on())]
        elif n in self_replica:
            devices = [DeviceSpec(0, nat(), churny()), DeviceSpec(1, nat(), mostly_on())]
        else:
            devices = [DeviceSpec(0, nat(), churny())]
        if n in shared:
            mirrors = [MirrorSpec(hub, 1, None)]
        elif n in mirrored:
            picks = []
            options = [h for h in steady if h in adj[n]]
            if options:
                picks.append(rng.choice(options))
            options = [m for m in churners if m != n and m in adj[n]]
            if options:
                picks.append(rng.choice(options))
            mirrors = [MirrorSpec(m, r + 1, None) for r, m in enumerate(picks)]
        fr = sorted(adj[n])
        zones = {"close": set(rng.sample(fr, min(len(fr), 10)))} if fr else {}
        specs.append(UserSpec(n, devices, zones, mirrors))
    td = None
    if takedown_days:
        td = {"start_ms": (takedown_days[0] - 1) * DAY_MS, "end_ms": takedown_days[1] * DAY_MS}
    return Scenario(
        "scaled-deployment", seed, specs, edge_list, days=days, crypto="toy",
        intervals={"registration_ms": 30 * 60_000, "refresh_ms": 6 * hour, "sync_ms": 2 * hour,
                   "relay_heartbeat_ms": 30 * 60_000},
        activity={"posts_per_user_day": 2.0, "friend_post_ratio": 0.3, "comment_ratio": 0.3, "zone_share": 0.2,
                  "pull_fanout": 4},
        relays={"count": relays, "capacity": relay_capacity}, takedown=td,
        groups={"no_replica": no_replica, "self_replica": self_replica, "mirrored": mirrored,
                "shared_mirror": shared, "hosts": sorted(hosts)})

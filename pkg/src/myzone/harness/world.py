"""Drive a scenario through the service and replication layers.

Everything runs on the network's event queue. Periodic tasks reschedule
themselves with a per-entity phase so that users do not act in lockstep:

* online/offline steps from each device's schedule (a device registers as
  soon as it comes online);
* registration refresh per device (falls back to a relay keep-alive when no
  rendezvous answers);
* relay heartbeats to the rendezvous;
* the rendezvous takedown window (the server's endpoint is detached);
* posts (Poisson per user), pull rounds (plus delivery of queued posts) and
  replica syncs.

A user acts through its *active* device: the lowest-priority device that is
online. All randomness comes from one ``random.Random(seed)`` consumed in
event order, so a (scenario, seed) pair always yields the same log.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Optional

from .. import crypto
from ..errors import SessionFailed
from ..peer import Deployment, MirrorSet, PeerDevice
from ..relay import RelayConfig
from ..rendezvous import RendezvousConfig
from ..replication import ALL, EntryKind, ReplicaEngine, ReplicationSettings
from ..sessionlog import SessionLogEntry
from .scenario import Scenario

log = logging.getLogger(__name__)

RENDEZVOUS = "rv"


@dataclass
class WorldStats:
    relay_bytes: int = 0
    relay_slots_granted: int = 0
    t1_events: int = 0
    registrations: int = 0
    registration_failures: int = 0
    posts_created: int = 0
    update_sessions_ok: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RunResult:
    scenario: Scenario
    log: list
    stats: WorldStats
    deployment: Deployment
    engines: dict = field(default_factory=dict)    # eid -> ReplicaEngine

    def engine_of(self, user: str, priority: int = 0) -> ReplicaEngine:
        return self.engines[f"{user}#{priority}"]


class World:
    def __init__(self, scenario: Scenario, seed: Optional[int] = None):
        self.sc = scenario
        self.seed = scenario.seed if seed is None else seed
        self.rng = random.Random(self.seed)
        iv = scenario.intervals
        scheme = crypto.TOY if scenario.crypto == "toy" else crypto.get_scheme("standard")
        self.d = Deployment(seed=self.seed, scheme=scheme)
        hb = iv["relay_heartbeat_ms"]
        self.d.add_rendezvous(RENDEZVOUS, RendezvousConfig(age_ms=3 * hb, refresh_interval_ms=hb,
                                                           registration_refresh_ms=iv["registration_ms"]),
                              primary=True)
        for i in range(scenario.relays["count"]):
            self.d.add_relay(f"relay{i:02d}", RelayConfig(max_connections=scenario.relays["capacity"],
                                                          ping_interval_ms=iv["registration_ms"]))
        self.log: list[SessionLogEntry] = []
        self.stats = WorldStats()
        self.devices: dict[str, list[PeerDevice]] = {}
        self.engines: dict[str, ReplicaEngine] = {}
        settings = ReplicationSettings(sync_period_ms=iv["sync_ms"], refresh_interval_ms=iv["refresh_ms"])
        for u in scenario.users:
            devs = []
            for spec in sorted(u.devices, key=lambda s: s.priority):
                devs.append(self.d.add_device(u.name, spec.priority, spec.nat, online=spec.online_at(0)))
            self.devices[u.name] = devs
        for u in scenario.users:
            self.devices[u.name][0].obtain_certificate()
        for a, b in scenario.edges:
            self.d.identity(a).befriend(self.d.identity(b))
        for u in scenario.users:
            self.d.identity(u.name).mirrors = MirrorSet([(m.name, m.rank, m.capacity) for m in u.mirrors])
            for dev in self.devices[u.name]:
                eng = ReplicaEngine(dev, settings, sink=self.log.append)
                for z, members in sorted(u.zones.items()):
                    eng.set_zone(z, sorted(members))
                self.engines[dev.eid] = eng
        for u in scenario.users:
            for m in u.mirrors:
                self.engines[f"{m.name}#0"].host(u.name)
        self.friends = scenario.friends_of()

    # --- helpers -------------------------------------------------------------
    def active(self, user: str) -> Optional[PeerDevice]:
        for dev in self.devices[user]:
            if dev.connected():
                return dev
        return None

    def _phase(self, period: int) -> int:
        return self.rng.randrange(period)

    def _every(self, period: int, fn, *args) -> None:
        horizon = self.sc.horizon_ms

        def tick():
            fn(*args)
            if self.d.net.now + period < horizon:
                self.d.net.call_later(period, tick)

        first = self._phase(period)
        if first < horizon:
            self.d.net.schedule(first, tick)

    # --- device lifecycle -------------------------------------------------------
    def _register(self, dev: PeerDevice) -> None:
        if not dev.connected():
            return
        if dev.nat_kind is None:
            dev.classify()
        before = dev.relay_slot
        if dev.register():
            self.stats.registrations += 1
            if dev.relay_slot is not None and dev.relay_slot != before:
                self.stats.relay_slots_granted += 1
        else:
            self.stats.registration_failures += 1
            dev.keep_alive()

    def _go_online(self, dev: PeerDevice) -> None:
        if not dev.connected():
            dev.go_online()
        self._register(dev)

    def _go_offline(self, dev: PeerDevice) -> None:
        if dev.connected():
            dev.go_offline()

    # --- activity ------------------------------------------------------------------
    def _post(self, user: str) -> None:
        dev = self.active(user)
        if dev is None:
            return
        eng = self.engines[dev.eid]
        act = self.sc.activity
        body = f"{user}/{self.d.net.now}/{self.rng.getrandbits(32):08x}".encode()
        r = self.rng.random()
        friends = self.friends[user]
        if friends and r < act["friend_post_ratio"]:
            target = self.rng.choice(friends)
            eng.queue_post(target, EntryKind.WALL_POST, ALL, body)
            eng.push_posts(target)
        elif friends and r < act["friend_post_ratio"] + act["comment_ratio"]:
            target = self.rng.choice(friends)
            cache = eng.cache.get(target)
            parents = [e for e in cache.live() if e.kind in (EntryKind.WALL_POST, EntryKind.STATUS)] if cache else []
            if parents:
                parent = self.rng.choice(parents)
                eng.queue_post(target, EntryKind.COMMENT, ALL, body, parent.id)
                eng.push_posts(target)
            else:
                self._own_post(eng, body)
        else:
            self._own_post(eng, body)
        self.stats.posts_created += 1

    def _own_post(self, eng: ReplicaEngine, body: bytes) -> None:
        zones = [z for z in eng.profile.zone_names() if z != ALL]
        zone = ALL
        if zones and self.rng.random() < self.sc.activity["zone_share"]:
            zone = self.rng.choice(zones)
        eng.create_entry(EntryKind.STATUS, zone, body)

    def _pull_round(self, user: str, fanout: Optional[int] = None) -> None:
        dev = self.active(user)
        if dev is None:
            return
        eng = self.engines[dev.eid]
        friends = self.friends[user]
        k = self.sc.activity["pull_fanout"] if fanout is None else fanout
        if k and k < len(friends):
            friends = sorted(self.rng.sample(friends, k))
        eng.push_posts()
        for f in friends:
            try:
                eng.pull_updates(f)
                self.stats.update_sessions_ok += 1
            except SessionFailed:
                pass

    def _sync(self, dev: PeerDevice) -> None:
        if not dev.connected():
            return
        eng = self.engines[dev.eid]
        if eng.replicas():
            eng.sync_with_replicas()

    def _post_loop(self, user: str, mean_gap: float) -> None:
        self._post(user)
        nxt = self.d.net.now + max(1, int(self.rng.expovariate(1.0 / mean_gap)))
        if nxt < self.sc.horizon_ms:
            self.d.net.schedule(nxt, self._post_loop, user, mean_gap)

    # --- run ---------------------------------------------------------------------------
    def schedule(self) -> None:
        sc = self.sc
        iv = sc.intervals
        horizon = sc.horizon_ms
        net = self.d.net
        self.d.relay_heartbeats()
        for u in sc.users:
            for dev, spec in zip(self.devices[u.name], sorted(u.devices, key=lambda s: s.priority)):
                if dev.connected():
                    dev.bootstrap()
                    self.stats.registrations += 1
                for s, e in spec.intervals(horizon):
                    if s > 0:
                        net.schedule(s, self._go_online, dev)
                    if e < horizon:
                        net.schedule(e, self._go_offline, dev)
        self._every(iv["relay_heartbeat_ms"], self.d.relay_heartbeats)
        if sc.takedown:
            net.schedule(sc.takedown["start_ms"], net.detach, RENDEZVOUS)
            if sc.takedown["end_ms"] < horizon:
                net.schedule(sc.takedown["end_ms"], net.attach, RENDEZVOUS)
        rate = sc.activity["posts_per_user_day"]
        for u in sc.users:
            for dev in self.devices[u.name]:
                self._every(iv["registration_ms"], self._register, dev)
                self._every(iv["sync_ms"], self._sync, dev)
            self._every(iv["refresh_ms"], self._pull_round, u.name)
            if rate > 0:
                mean_gap = sc.day_ms / rate
                first = int(self.rng.expovariate(1.0 / mean_gap))
                if first < horizon:
                    net.schedule(first, self._post_loop, u.name, mean_gap)

    def drain(self) -> None:
        """Deliver every queued post, then one full pull round per user."""
        for u in self.sc.users:
            dev = self.active(u.name)
            if dev is not None:
                self.engines[dev.eid].push_posts()
        for u in self.sc.users:
            self._pull_round(u.name, fanout=0)

    def run(self) -> RunResult:
        self.schedule()
        self.d.net.step(self.sc.horizon_ms)
        if self.sc.drain:
            self.drain()
        self.stats.relay_bytes = sum(r.bytes_forwarded for r in self.d.relays.values())
        self.stats.t1_events = sum(len(dev.t1_events) for devs in self.devices.values() for dev in devs)
        return RunResult(self.sc, self.log, self.stats, self.d, dict(self.engines))


def run(scenario: Scenario, seed: Optional[int] = None) -> RunResult:
    """Simulate ``scenario``; the log holds one entry per pull, post or sync attempt."""
    return World(scenario, seed).run()

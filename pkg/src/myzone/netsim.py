"""Deterministic discrete-event network with NAT models.

The :class:`Network` owns a virtual clock (integer milliseconds) and a single
event queue ordered by ``(time, insertion sequence)``. Endpoints sit behind a
:class:`NatProfile`; datagrams are admitted or dropped by the receiving NAT
at send time, and streams are reliable and FIFO per direction.

NAT behaviour follows the four classic cone/symmetric types:

* FullCone: once mapped, any host may send to the external address.
* AddressRestricted: a host may send only after the inside socket sent to
  that host's address (any port).
* PortRestricted: as above but the exact remote ``addr:port`` must match.
* Symmetric: every remote ``addr:port`` gets its own mapping; hole punching
  through it never works.

Network scenario files are JSON objects (``"version": 1``)::

    {
      "version": 1,
      "seed": 7,
      "latency_ms": 10,              # default per hop
      "loss": 0.0,                   # datagram loss probability
      "hole_ttl_ms": null,           # null = holes never expire
      "endpoints": [{"id": "a", "nat": "Symmetric", "online": true}],
      "links": [{"a": "a", "b": "b", "latency_ms": 25}],
      "partitions": [{"a": "a", "b": "b", "start_ms": 0, "end_ms": 500}],
      "sends": [{"at_ms": 0, "src": "a", "dst": "b", "payload": "hi",
                 "channel": "Datagram"}]
    }

``dst`` in a scripted send names an endpoint; its current listening address
is used.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Optional

from .errors import ScenarioInvalid, StunUnreachable, Unreachable

Addr = tuple[str, int]

DEFAULT_LATENCY_MS = 10
LISTEN_PORT = 7000


class NatType(Enum):
    PUBLIC = "Public"
    FULL_CONE = "FullCone"
    ADDRESS_RESTRICTED = "AddressRestricted"
    PORT_RESTRICTED = "PortRestricted"
    SYMMETRIC = "Symmetric"


class Reach(Enum):
    DIRECT = "Direct"
    AFTER_HOLE_PUNCH = "AfterHolePunch"
    RELAY_REQUIRED = "RelayRequired"


class Channel(Enum):
    DATAGRAM = "Datagram"
    STREAM = "Stream"


@dataclass(frozen=True)
class Hole:
    mapping: Addr
    remote_addr: str
    remote_port: Optional[int]  # None: any port
    opened_at: int


@dataclass
class NatProfile:
    nat: NatType
    public_ip: str
    mappings: dict = field(default_factory=dict)
    holes: set = field(default_factory=set)
    hole_ttl_ms: Optional[int] = None
    _next_port: int = 40000
    _externals: set = field(default_factory=set)

    def reset(self, public_ip: str) -> None:
        self.public_ip = public_ip
        self.clear()

    def clear(self) -> None:
        self.mappings.clear()
        self.holes.clear()
        self._externals.clear()

    def _alloc(self) -> Addr:
        self._next_port += 1
        return (self.public_ip, self._next_port)

    def map_outbound(self, internal: Addr, dst: Addr, now: int) -> Addr:
        """External address used for a packet from ``internal`` to ``dst``."""
        if self.nat is NatType.PUBLIC:
            return internal
        key = (internal, dst) if self.nat is NatType.SYMMETRIC else internal
        external = self.mappings.get(key)
        if external is None:
            external = self._alloc()
            self.mappings[key] = external
            self._externals.add(external)
        if self.nat is NatType.ADDRESS_RESTRICTED:
            self.holes.add(Hole(external, dst[0], None, now))
        elif self.nat in (NatType.PORT_RESTRICTED, NatType.SYMMETRIC):
            self.holes.add(Hole(external, dst[0], dst[1], now))
        return external

    def listening_address(self, internal: Addr, observer: Addr, now: int) -> Addr:
        """Address a public observer (STUN, rendezvous) sees for ``internal``."""
        return self.map_outbound(internal, observer, now)

    def _live(self, hole: Hole, now: int) -> bool:
        return self.hole_ttl_ms is None or now - hole.opened_at <= self.hole_ttl_ms

    def owns(self, external: Addr) -> bool:
        return external in self._externals

    def admits(self, external: Addr, src: Addr, now: int) -> bool:
        """Would an inbound packet from ``src`` to ``external`` pass?"""
        nat = self.nat
        if nat is NatType.PUBLIC:
            return True
        if not self.owns(external):
            return False
        if nat is NatType.FULL_CONE:
            return True
        for hole in self.holes:
            if hole.mapping != external or hole.remote_addr != src[0] or not self._live(hole, now):
                continue
            if nat is NatType.ADDRESS_RESTRICTED or hole.remote_port == src[1]:
                return True
        return False


def can_reach(initiator: NatProfile, responder: NatProfile, prior_outbound: bool) -> Reach:
    """Connection feasibility from ``initiator`` to ``responder``.

    ``prior_outbound`` means the responder has already sent a packet to the
    initiator's advertised (publicly observed) address.
    """
    r = responder.nat
    if r is NatType.PUBLIC:
        return Reach.DIRECT
    if r is NatType.FULL_CONE:
        if responder.mappings:
            return Reach.DIRECT
        return Reach.AFTER_HOLE_PUNCH if prior_outbound else Reach.RELAY_REQUIRED
    if r is NatType.SYMMETRIC or not prior_outbound:
        return Reach.RELAY_REQUIRED
    if r is NatType.ADDRESS_RESTRICTED:
        return Reach.AFTER_HOLE_PUNCH
    # port restricted: the initiator's real source port must equal the one
    # the responder punched toward, which a symmetric initiator never keeps
    if initiator.nat is NatType.SYMMETRIC:
        return Reach.RELAY_REQUIRED
    return Reach.AFTER_HOLE_PUNCH


def needs_relay(nat: NatType) -> bool:
    return nat not in (NatType.PUBLIC, NatType.FULL_CONE)


@dataclass
class Endpoint:
    eid: str
    nat: NatProfile
    internal: Addr
    online: bool = True
    handler: Any = None
    session: int = 0
    inbox: list = field(default_factory=list)

    @property
    def is_public(self) -> bool:
        return self.nat.nat is NatType.PUBLIC


@dataclass(frozen=True)
class NetEvent:
    deliver_at: int
    src: str
    dst: str
    payload: bytes
    channel: Channel


class Network:
    def __init__(self, seed: int = 0, latency_ms: int = DEFAULT_LATENCY_MS, loss: float = 0.0,
                 hole_ttl_ms: Optional[int] = None):
        if latency_ms <= 0:
            raise ValueError("latency must be positive")
        self.now = 0
        self.latency_ms = latency_ms
        self.loss = loss
        self.hole_ttl_ms = hole_ttl_ms
        self.rng = random.Random(seed)
        self.endpoints: dict[str, Endpoint] = {}
        self.link_latency: dict[frozenset, int] = {}
        self.partitions: list[tuple[frozenset, int, int]] = []
        self._queue: list = []
        self._seq = 0
        self._ip_counter = 0
        self._stream_clock: dict[tuple[str, str], int] = {}
        self._ip_owner: dict[str, str] = {}
        self._trace = hashlib.sha256()
        self.delivered = 0
        self.sent = 0
        self.dropped = 0

    # --- scheduling --------------------------------------------------
    def schedule(self, at: int, fn: Callable, *args) -> None:
        if at < self.now:
            raise ValueError(f"cannot schedule in the past ({at} < {self.now})")
        self._seq += 1
        heapq.heappush(self._queue, (at, self._seq, fn, args))

    def call_later(self, delay: int, fn: Callable, *args) -> None:
        self.schedule(self.now + delay, fn, *args)

    def step(self, until: int) -> int:
        """Run every event due at or before ``until``; returns deliveries."""
        if until < self.now:
            raise ValueError("until precedes the current clock")
        before = self.delivered
        queue = self._queue
        while queue and queue[0][0] <= until:
            at, _, fn, args = heapq.heappop(queue)
            self.now = at
            fn(*args)
        self.now = until
        return self.delivered - before

    def pending(self) -> int:
        return len(self._queue)

    # --- topology ----------------------------------------------------
    def _fresh_ip(self, public: bool) -> str:
        self._ip_counter += 1
        n = self._ip_counter
        prefix = "198.51" if public else "100.64"
        return f"{prefix}.{(n >> 8) & 255}.{n & 255}" if n < 65536 else f"{prefix}.{n}"

    def add_endpoint(self, eid: str, nat: NatType = NatType.PUBLIC, *, online: bool = True,
                     handler: Any = None, port: int = LISTEN_PORT) -> Endpoint:
        if eid in self.endpoints:
            raise ValueError(f"duplicate endpoint {eid!r}")
        public = nat is NatType.PUBLIC
        ip = self._fresh_ip(public)
        internal = (ip, port) if public else (f"10.0.{len(self.endpoints) & 255}.{1 + len(self.endpoints) // 256}", port)
        profile = NatProfile(nat, ip if public else self._fresh_ip(False), hole_ttl_ms=self.hole_ttl_ms)
        ep = Endpoint(eid, profile, internal, online, handler)
        self.endpoints[eid] = ep
        self._ip_owner[profile.public_ip] = eid
        return ep

    def endpoint(self, eid: str) -> Endpoint:
        return self.endpoints[eid]

    def attach(self, eid: str) -> Endpoint:
        """Bring an endpoint online with a fresh connection (new public IP)."""
        ep = self.endpoints[eid]
        ep.online = True
        ep.session += 1
        if not ep.is_public:
            self._ip_owner.pop(ep.nat.public_ip, None)
            ep.nat.reset(self._fresh_ip(False))
            self._ip_owner[ep.nat.public_ip] = eid
        return ep

    def detach(self, eid: str) -> None:
        ep = self.endpoints[eid]
        ep.online = False
        if not ep.is_public:
            ep.nat.clear()

    def set_link_latency(self, a: str, b: str, latency_ms: int) -> None:
        if latency_ms <= 0:
            raise ValueError("latency must be positive")
        self.link_latency[frozenset((a, b))] = latency_ms

    def latency(self, a: str, b: str) -> int:
        return self.link_latency.get(frozenset((a, b)), self.latency_ms)

    def partition(self, a: str, b: str, start_ms: int = 0, end_ms: Optional[int] = None) -> None:
        self.partitions.append((frozenset((a, b)), start_ms, end_ms if end_ms is not None else 1 << 62))

    def partitioned(self, a: str, b: str, at: Optional[int] = None) -> bool:
        t = self.now if at is None else at
        key = frozenset((a, b))
        return any(k == key and s <= t < e for k, s, e in self.partitions)

    def public_address(self, eid: str, observer: Addr = ("198.51.0.1", 3478)) -> Addr:
        """Listening address of ``eid`` as seen by a public observer."""
        ep = self.endpoints[eid]
        return ep.nat.listening_address(ep.internal, observer, self.now)

    def owner_of(self, addr: Addr) -> Optional[Endpoint]:
        eid = self._ip_owner.get(addr[0])
        if eid is None:
            return None
        ep = self.endpoints[eid]
        if not ep.online:
            return None
        if ep.is_public:
            return ep if ep.internal == addr else None
        return ep if ep.nat.owns(addr) else None

    # --- delivery ----------------------------------------------------
    def check_path(self, src_eid: str, dst: Addr, src_port: Optional[int] = None) -> tuple[Endpoint, Addr]:
        """Validate a send from ``src_eid`` to ``dst``.

        Returns ``(destination endpoint, source external address)`` or raises
        :class:`Unreachable`.
        """
        src = self.endpoints[src_eid]
        if not src.online:
            raise Unreachable(f"{src_eid} is offline")
        target = self.owner_of(dst)
        if target is None:
            raise Unreachable(f"no endpoint at {dst[0]}:{dst[1]}")
        if self.partitioned(src_eid, target.eid):
            raise Unreachable(f"{src_eid} and {target.eid} are partitioned")
        internal = (src.internal[0], src_port) if src_port is not None else src.internal
        src_external = src.nat.map_outbound(internal, dst, self.now)
        if not target.nat.admits(dst, src_external, self.now):
            raise Unreachable(f"{target.nat.nat.value} NAT at {dst[0]}:{dst[1]} drops traffic from {src_eid}")
        return target, src_external

    def send(self, src_eid: str, dst: Addr, payload: bytes, channel: Channel = Channel.DATAGRAM,
             src_port: Optional[int] = None) -> bool:
        """Queue ``payload``; returns False when the network drops it."""
        self.sent += 1
        try:
            target, src_external = self.check_path(src_eid, dst, src_port)
        except Unreachable:
            self.dropped += 1
            return False
        if channel is Channel.DATAGRAM and self.loss > 0 and self.rng.random() < self.loss:
            self.dropped += 1
            return False
        at = self.now + self.latency(src_eid, target.eid)
        if channel is Channel.STREAM:
            key = (src_eid, target.eid)
            at = max(at, self._stream_clock.get(key, 0))
            self._stream_clock[key] = at
        event = NetEvent(at, src_eid, target.eid, bytes(payload), channel)
        self.schedule(at, self._deliver, event, src_external, target.session)
        return True

    def _deliver(self, event: NetEvent, src_external: Addr, session: int) -> None:
        target = self.endpoints[event.dst]
        if not target.online or target.session != session:
            self.dropped += 1
            return
        self.delivered += 1
        self._trace.update(
            f"{event.deliver_at}|{event.src}|{event.dst}|{event.channel.value}|".encode()
            + hashlib.sha256(event.payload).digest()
        )
        if target.handler is not None and hasattr(target.handler, "on_datagram"):
            target.handler.on_datagram(event, src_external)
        else:
            target.inbox.append((event, src_external))

    def trace_hash(self) -> str:
        return self._trace.copy().hexdigest()


# --- STUN --------------------------------------------------------------

@dataclass
class DualHomedStun:
    """A probe service with two public addresses, each listening on two ports."""

    primary_eid: str
    secondary_eid: str
    primary_ip: str
    secondary_ip: str
    port: int = 3478
    alt_port: int = 3479

    @classmethod
    def install(cls, network: Network, name: str = "stun") -> "DualHomedStun":
        a = network.add_endpoint(f"{name}-a", NatType.PUBLIC, port=3478)
        b = network.add_endpoint(f"{name}-b", NatType.PUBLIC, port=3478)
        if a.internal[0] == b.internal[0]:
            raise ValueError("STUN needs two distinct public addresses")
        return cls(a.eid, b.eid, a.internal[0], b.internal[0])


def classify_nat(network: Network, eid: str, stun: DualHomedStun) -> NatType:
    """Replay the classic dual-address probe sequence against the NAT model."""
    ep = network.endpoint(eid)
    now = network.now
    reach_a = not network.partitioned(eid, stun.primary_eid)
    reach_b = not network.partitioned(eid, stun.secondary_eid)
    if not ep.online or not (reach_a or reach_b):
        raise StunUnreachable(f"{eid} cannot reach either STUN address")
    if reach_a:
        main_ip, other_ip, other_ok = stun.primary_ip, stun.secondary_ip, reach_b
    else:
        main_ip, other_ip, other_ok = stun.secondary_ip, stun.primary_ip, reach_a
    nat = ep.nat
    internal = ep.internal
    # test I: plain binding request
    mapped = nat.map_outbound(internal, (main_ip, stun.port), now)
    if mapped == internal:
        return NatType.PUBLIC
    # test II: answer from the other address and other port
    if other_ok and nat.admits(mapped, (other_ip, stun.alt_port), now):
        return NatType.FULL_CONE
    if not other_ok and nat.admits(mapped, (main_ip, stun.alt_port), now):
        # single reachable address cannot separate full cone from address restricted
        return NatType.FULL_CONE
    # test I repeated toward the other address
    if other_ok and nat.map_outbound(internal, (other_ip, stun.port), now) != mapped:
        return NatType.SYMMETRIC
    # test III: answer from the same address, other port
    if nat.admits(mapped, (main_ip, stun.alt_port), now):
        return NatType.ADDRESS_RESTRICTED
    return NatType.PORT_RESTRICTED


# --- scenario files ----------------------------------------------------

def load_network_scenario(source) -> tuple[Network, list[dict]]:
    """Build a network from a scenario dict or JSON file path.

    Returns the network and the scripted sends (already scheduled).
    """
    if isinstance(source, (str, Path)):
        data = json.loads(Path(source).read_text())
    else:
        data = source
    problems = []
    if data.get("version") != 1:
        problems.append(("version", "must be 1"))
    nats = {n.value: n for n in NatType}
    for i, ep in enumerate(data.get("endpoints", [])):
        if ep.get("nat", "Public") not in nats:
            problems.append((f"endpoints[{i}].nat", f"unknown NAT type {ep.get('nat')!r}"))
    loss = data.get("loss", 0.0)
    if not 0.0 <= loss <= 1.0:
        problems.append(("loss", "must be within [0, 1]"))
    if problems:
        raise ScenarioInvalid(problems)
    net = Network(seed=data.get("seed", 0), latency_ms=data.get("latency_ms", DEFAULT_LATENCY_MS),
                  loss=loss, hole_ttl_ms=data.get("hole_ttl_ms"))
    for ep in data.get("endpoints", []):
        net.add_endpoint(ep["id"], nats[ep.get("nat", "Public")], online=ep.get("online", True))
    for link in data.get("links", []):
        net.set_link_latency(link["a"], link["b"], link["latency_ms"])
    for part in data.get("partitions", []):
        net.partition(part["a"], part["b"], part.get("start_ms", 0), part.get("end_ms"))
    sends = list(data.get("sends", []))
    for s in sends:
        channel = Channel(s.get("channel", "Datagram"))
        net.schedule(s["at_ms"], _scripted_send, net, s["src"], s["dst"], s.get("payload", "").encode(), channel)
    return net, sends


def _scripted_send(net: Network, src: str, dst: str, payload: bytes, channel: Channel) -> None:
    target = net.endpoints[dst]
    observer = net.endpoints[src].internal if net.endpoints[src].is_public else ("198.51.0.1", 3478)
    if target.is_public:
        addr = target.internal
    else:
        addr = target.nat.listening_address(target.internal, observer, net.now)
    net.send(src, addr, payload, channel)

"""Peer devices: NAT discovery, registration, friend location, secure
channels and the friendship lifecycle.

A :class:`Deployment` ties the service layer together on one
:class:`~myzone.netsim.Network`: the CA, a dual-homed STUN service,
rendezvous servers and relays. Protocol exchanges are synchronous
request/reply calls; every hop is checked against the network model at call
time (online state, partitions, NAT admission, relay slot liveness) and the
simulated latency is accumulated on the returned objects.

Friendship tokens: the requester ``R`` picks a fresh token ``t`` for target
``T``, registers it (it resolves to ``R``) and leaves ``t`` sealed to ``T``
at the rendezvous. When ``T`` accepts it registers ``reply_token(t)``, a
token only the two of them can compute. ``R`` learns of the acceptance when
``reply_token(t)`` starts resolving.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from . import ca as ca_mod
from . import crypto
from .crypto import Certificate, KeyPair, Scheme, SessionKey
from .errors import (AllUnreachable, AuthenticityFailure, AuthFailure, CapacityExhausted, ConfidentialityFailure,
                     DigestMismatch, InvalidTransition, MyZoneError, NoRelayAvailable, NotFound, PairBroken, Refused,
                     SessionFailed, UnknownSlot, Unreachable)
from .netsim import DualHomedStun, NatType, Network, classify_nat, needs_relay
from .relay import CLIENT_SIDE, SERVER_SIDE, RelayConfig, RelayServer
from .rendezvous import (MAX_SELF_PRIORITY, MIRROR_OFFSET, FriendshipRequest, NatKind, RegistrationRecord,
                         RendezvousConfig, RendezvousServer)

log = logging.getLogger(__name__)

MAX_MIRROR_PROBE = 16


class FriendState(Enum):
    PENDING_SENT = "PendingSent"
    PENDING_RECEIVED = "PendingReceived"
    ACTIVE = "Active"
    REVOKED = "Revoked"


@dataclass
class Friendship:
    state: FriendState
    my_token: Optional[bytes] = None      # resolves to me; held by the friend
    friend_token: Optional[bytes] = None  # resolves to the friend; held by me
    established_at: Optional[int] = None


@dataclass
class MirrorSet:
    """Ranked mirrors: ``(username, rank, capacity_bytes)`` with ranks 1..k."""

    entries: list = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        names = [e[0] for e in self.entries]
        ranks = sorted(e[1] for e in self.entries)
        if len(set(names)) != len(names):
            raise ValueError("duplicate mirror")
        if ranks != list(range(1, len(ranks) + 1)):
            raise ValueError("mirror ranks must be consecutive from 1")

    def ranked(self) -> list[tuple[str, int, int]]:
        return sorted(self.entries, key=lambda e: e[1])

    def names(self) -> list[str]:
        return [e[0] for e in self.ranked()]

    def capacity_of(self, name: str) -> Optional[int]:
        for n, _, cap in self.entries:
            if n == name:
                return cap
        return None

    def pairs(self) -> tuple:
        return tuple((n, r) for n, r, _ in self.ranked())

    def remove(self, name: str) -> None:
        kept = [e for e in self.ranked() if e[0] != name]
        self.entries = [(n, i + 1, c) for i, (n, _, c) in enumerate(kept)]


def reply_token(token: bytes) -> bytes:
    return hashlib.sha256(b"myzone/friend-reply" + token).digest()[:16]


@dataclass
class T1Event:
    """A located record that failed verification (tampering evidence)."""

    server: str
    friend: str
    priority: int
    at: int


@dataclass
class PeerIdentity:
    """State shared by every device of one user."""

    username: str
    keys: KeyPair
    certificate: Optional[Certificate] = None
    friendships: dict = field(default_factory=dict)
    mirrors: MirrorSet = field(default_factory=MirrorSet)
    devices: dict = field(default_factory=dict)   # priority -> PeerDevice
    known_certs: dict = field(default_factory=dict)
    on_revoke: list = field(default_factory=list)
    _token_counter: int = 0

    def add_device(self, device: "PeerDevice") -> None:
        if not 0 <= device.priority <= MAX_SELF_PRIORITY:
            raise ValueError("device priority must be 0, 1 or 2")
        if device.priority in self.devices:
            raise ValueError(f"{self.username} already has a priority-{device.priority} device")
        self.devices[device.priority] = device

    def check_devices(self) -> None:
        if 0 not in self.devices:
            raise ValueError(f"{self.username} has no primary device")

    def fresh_token(self, friend: str) -> bytes:
        self._token_counter += 1
        material = crypto.encode_fields([self.keys.private_key, self.username, friend, self._token_counter])
        return hashlib.sha256(b"myzone/token" + material).digest()[:16]

    @property
    def self_token(self) -> bytes:
        """Token that resolves to this user for its own devices."""
        material = crypto.encode_fields([self.keys.private_key, self.username, "self"])
        return hashlib.sha256(b"myzone/token" + material).digest()[:16]

    def registered_tokens(self) -> tuple:
        out = [self.self_token]
        for name in sorted(self.friendships):
            f = self.friendships[name]
            if f.state in (FriendState.ACTIVE, FriendState.PENDING_SENT) and f.my_token:
                out.append(f.my_token)
        return tuple(out)

    def is_friend(self, name: str) -> bool:
        f = self.friendships.get(name)
        return f is not None and f.state is FriendState.ACTIVE

    def friends(self) -> list[str]:
        return sorted(n for n, f in self.friendships.items() if f.state is FriendState.ACTIVE)

    def befriend(self, other: "PeerIdentity", now: int = 0) -> None:
        """Establish an Active friendship out of band (scenario setup)."""
        a, b = self.fresh_token(other.username), other.fresh_token(self.username)
        self.friendships[other.username] = Friendship(FriendState.ACTIVE, a, b, now)
        other.friendships[self.username] = Friendship(FriendState.ACTIVE, b, a, now)
        if self.certificate:
            other.known_certs[self.username] = self.certificate
        if other.certificate:
            self.known_certs[other.username] = other.certificate


@dataclass
class SecureChannel:
    client: "PeerDevice"
    server: "PeerDevice"
    key: SessionKey
    target: str
    serving: str
    serving_priority: int
    relay: Optional[RelayServer] = None
    conn_id: Optional[int] = None
    slot_port: Optional[int] = None
    server_session: int = -1
    elapsed_ms: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0
    _nonce: int = 0

    def _rtt(self) -> int:
        d = self.client.deployment
        if self.relay is None:
            return 2 * d.net.latency(self.client.eid, self.server.eid)
        return 2 * (d.net.latency(self.client.eid, self.relay.name) + d.net.latency(self.relay.name, self.server.eid))

    def _seal(self, data: bytes) -> bytes:
        self._nonce += 1
        return self.client.scheme.session_encrypt(self.key.key, data, self._nonce.to_bytes(12, "big"))

    def _alive(self) -> bool:
        d = self.client.deployment
        if not (self.client.connected() and self.server.connected()):
            return False
        if self.server.endpoint.session != self.server_session:
            return False
        if self.relay is None:
            return not d.net.partitioned(self.client.eid, self.server.eid)
        return (d.reachable(self.client.eid, self.relay.name) and d.reachable(self.server.eid, self.relay.name)
                and self.relay.slot_alive(self.slot_port, d.net.now))

    def request(self, payload: bytes) -> bytes:
        """One encrypted request/response exchange with the serving device."""
        if not self._alive():
            raise SessionFailed(f"channel to {self.serving} broke")
        scheme = self.client.scheme
        now = self.client.deployment.net.now
        sealed = self._seal(payload)
        self.bytes_sent += len(sealed)
        if self.relay is not None:
            try:
                self.relay.forward(self.conn_id, sealed, CLIENT_SIDE, now)
                (sealed,) = self.relay.receive(self.conn_id, SERVER_SIDE)
            except PairBroken as exc:
                raise SessionFailed(str(exc)) from exc
        plain = scheme.session_decrypt(self.key.key, sealed)
        reply = self.server.serve_request(self.client.identity.username, self.target, plain)
        if not self._alive():
            raise SessionFailed(f"channel to {self.serving} broke before the reply arrived")
        sealed_reply = self._seal(reply)
        if self.relay is not None:
            try:
                self.relay.forward(self.conn_id, sealed_reply, SERVER_SIDE, now)
                (sealed_reply,) = self.relay.receive(self.conn_id, CLIENT_SIDE)
            except PairBroken as exc:
                raise SessionFailed(str(exc)) from exc
        self.bytes_received += len(sealed_reply)
        self.elapsed_ms += self._rtt()
        return scheme.session_decrypt(self.key.key, sealed_reply)

    def close(self) -> None:
        if self.relay is not None and self.conn_id is not None:
            self.relay.close(self.conn_id)


@dataclass
class LocateResult:
    channel: SecureChannel
    serving: str
    priority: int
    attempts: int
    elapsed_ms: int
    t1_events: list


class PeerDevice:
    def __init__(self, deployment: "Deployment", identity: PeerIdentity, priority: int = 0,
                 nat: NatType = NatType.PUBLIC, online: bool = True):
        self.deployment = deployment
        self.identity = identity
        self.priority = priority
        self.eid = f"{identity.username}#{priority}"
        self.scheme = deployment.scheme
        self.endpoint = deployment.net.add_endpoint(self.eid, nat, online=online, handler=self)
        identity.add_device(self)
        self.nat_kind: Optional[NatKind] = None
        self.classified: Optional[NatType] = None
        self.relay: Optional[RelayServer] = None
        self.relay_slot: Optional[int] = None
        self.rendezvous_addr: Optional[tuple] = None
        self.record_cache: dict = {}    # (friend, priority) -> RegistrationRecord
        self.t1_events: list[T1Event] = []
        self.registered_session: Optional[int] = None
        self.last_registration: Optional[int] = None
        self.degraded = False
        self.app: Optional[Callable[[str, str, bytes], bytes]] = None
        self.authorize: Optional[Callable[[str, str], bool]] = None

    def __repr__(self) -> str:
        return f"PeerDevice({self.eid})"

    @property
    def username(self) -> str:
        return self.identity.username

    def connected(self) -> bool:
        return self.endpoint.online

    # --- lifecycle -----------------------------------------------------
    def go_online(self) -> None:
        self.deployment.net.attach(self.eid)
        self.relay = None
        self.relay_slot = None
        self.registered_session = None

    def go_offline(self) -> None:
        if self.relay is not None and self.relay_slot is not None:
            # the relay notices the dropped connection
            self.relay.slot_alive(self.relay_slot, self.deployment.net.now)
        self.deployment.net.detach(self.eid)

    def obtain_certificate(self) -> Certificate:
        ident = self.identity
        if ident.certificate is None:
            ident.certificate = ca_mod.obtain_certificate(self.deployment.ca, ident.keys, ident.username)
        return ident.certificate

    def classify(self) -> NatType:
        self.classified = classify_nat(self.deployment.net, self.eid, self.deployment.stun)
        self.nat_kind = {NatType.PUBLIC: NatKind.PUBLIC_IP, NatType.FULL_CONE: NatKind.FULL_CONE}.get(
            self.classified, NatKind.NON_FULL_CONE)
        return self.classified

    def bootstrap(self) -> bool:
        """Certificate, NAT class, relay if needed, then registration."""
        self.obtain_certificate()
        self.classify()
        return self.register()

    # --- relay -----------------------------------------------------------
    def ensure_relay(self, rv: RendezvousServer) -> bool:
        d = self.deployment
        now = d.net.now
        if self.relay is not None and self.relay_slot is not None:
            if self.relay.slot_alive(self.relay_slot, now) and d.reachable(self.eid, self.relay.name):
                try:
                    self.relay.keep_alive(self.relay_slot, now)
                    return True
                except UnknownSlot:
                    pass
            self.relay = None
            self.relay_slot = None
        tried = set()
        while True:
            try:
                addr = rv.request_relay(now, exclude=tried)
            except NoRelayAvailable:
                log.info("%s: no relay available; registering unreachable", self.eid)
                return False
            tried.add(addr)
            relay = d.relays.get(addr)
            if relay is None or not d.reachable(self.eid, relay.name):
                continue
            cert = self.identity.certificate
            try:
                response = relay.answer_challenge(self.identity.keys, relay.challenge(cert, now))
                port, _ = relay.accept_server_peer(cert, response, now, owner=(self.eid, self.endpoint.session))
            except (CapacityExhausted, AuthFailure):
                continue
            self.relay, self.relay_slot = relay, port
            return True

    def keep_alive(self) -> bool:
        if self.relay is None or self.relay_slot is None or not self.connected():
            return False
        try:
            self.relay.keep_alive(self.relay_slot, self.deployment.net.now)
            return True
        except UnknownSlot:
            self.relay = self.relay_slot = None
            return False

    # --- rendezvous ------------------------------------------------------
    def _rendezvous(self) -> Optional[RendezvousServer]:
        """First reachable rendezvous server (primary first, then backups)."""
        d = self.deployment
        for addr in d.rendezvous_order(self.rendezvous_addr):
            server = d.rendezvous_by_addr[addr]
            if d.reachable(self.eid, server.name):
                moved = server.primary_address()
                if moved and moved != addr and moved in d.rendezvous_by_addr:
                    target = d.rendezvous_by_addr[moved]
                    if d.reachable(self.eid, target.name):
                        self.rendezvous_addr = moved
                        return target
                return server
        return None

    def _session(self, rv: RendezvousServer) -> SessionKey:
        return crypto.open_session_key(self.identity.keys.private_key, rv.public_key,
                                       rv.handshake(self.identity.certificate, self.deployment.net.now), self.scheme)

    def build_record(self, rv: RendezvousServer) -> RegistrationRecord:
        d = self.deployment
        if self.nat_kind is None:
            self.classify()
        ip, port = d.net.public_address(self.eid, d.net.endpoint(rv.name).internal)
        relay_addr = relay_port = None
        if self.relay is not None:
            relay_addr, relay_port = self.relay.addr, self.relay_slot
        rec = RegistrationRecord(self.username, self.priority, ip, port, self.nat_kind, relay_addr=relay_addr,
                                 relay_port=relay_port, passphrases=self.identity.registered_tokens(),
                                 mirrors=self.identity.mirrors.pairs())
        return rec.signed(self.identity.keys.private_key, self.scheme)

    def register(self) -> bool:
        """(Re-)register with the rendezvous; False if it is unreachable."""
        if not self.connected():
            return False
        self.obtain_certificate()
        rv = self._rendezvous()
        if rv is None:
            return False
        if self.nat_kind is None:
            self.classify()
        if needs_relay(self.classified):
            self.degraded = not self.ensure_relay(rv)
        session = self._session(rv)
        pending = rv.register_peer(self.build_record(rv), session, self.deployment.net.now)
        rv.close_session(session)
        self.registered_session = self.endpoint.session
        self.last_registration = self.deployment.net.now
        for req in pending:
            self._receive_request(req)
        self._poll_acceptance(rv)
        return True

    # --- friendship --------------------------------------------------------
    def _cert_for(self, username: str, rv: Optional[RendezvousServer] = None) -> Optional[Certificate]:
        ident = self.identity
        cert = ident.known_certs.get(username)
        if cert is None:
            cert = self.deployment.ca.certificate_for(username)
            if cert is None and rv is not None:
                cert = rv.certificate_of(username)
            if cert is not None and crypto.verify_certificate(cert, self.deployment.ca.public_key, self.scheme):
                ident.known_certs[username] = cert
            else:
                cert = None
        return cert

    def send_friendship_request(self, target: str) -> bytes:
        ident = self.identity
        existing = ident.friendships.get(target)
        if existing is not None and existing.state is not FriendState.REVOKED:
            raise InvalidTransition(f"{ident.username} -> {target}: already {existing.state.value}")
        rv = self._rendezvous()
        if rv is None:
            raise Unreachable("no rendezvous reachable")
        cert = self._cert_for(target, rv)
        now = self.deployment.net.now
        token = ident.fresh_token(target)
        sealed = b"" if cert is None else crypto.seal(ident.keys.private_key, cert.public_key, token, self.scheme)
        session = self._session(rv)
        rv.submit_friendship_request(target, FriendshipRequest(ident.username, sealed, now), session)
        ident.friendships[target] = Friendship(FriendState.PENDING_SENT, token, reply_token(token))
        self.register()
        return token

    def _receive_request(self, req: FriendshipRequest) -> None:
        ident = self.identity
        cert = self._cert_for(req.requester)
        if cert is None:
            return
        try:
            token = crypto.open_sealed(ident.keys.private_key, cert.public_key, req.sealed_passphrase, self.scheme)
        except (AuthenticityFailure, ConfidentialityFailure):
            log.warning("%s: unreadable friendship request from %s", self.eid, req.requester)
            return
        current = ident.friendships.get(req.requester)
        if current is not None and current.state is FriendState.ACTIVE:
            return
        if current is not None and current.state is FriendState.PENDING_SENT:
            # crossing requests: each side already holds the other's token
            current.friend_token = token
            current.state = FriendState.ACTIVE
            current.established_at = self.deployment.net.now
            return
        ident.friendships[req.requester] = Friendship(FriendState.PENDING_RECEIVED, None, token)

    def accept_friendship(self, requester: str) -> None:
        f = self.identity.friendships.get(requester)
        if f is None or f.state is not FriendState.PENDING_RECEIVED:
            raise InvalidTransition(f"no pending request from {requester}")
        f.my_token = reply_token(f.friend_token)
        f.state = FriendState.ACTIVE
        f.established_at = self.deployment.net.now
        self.register()

    def _poll_acceptance(self, rv: RendezvousServer) -> None:
        for name in sorted(self.identity.friendships):
            f = self.identity.friendships[name]
            if f.state is not FriendState.PENDING_SENT:
                continue
            try:
                rec = rv.locate_peer(f.friend_token, 0)
            except NotFound:
                continue
            if rec.username == name:
                f.state = FriendState.ACTIVE
                f.established_at = self.deployment.net.now

    def revoke_friendship(self, friend: str) -> None:
        ident = self.identity
        f = ident.friendships.get(friend)
        if f is None or f.state is FriendState.REVOKED:
            raise InvalidTransition(f"{friend} is not a friend")
        f.state = FriendState.REVOKED
        f.my_token = f.friend_token = None
        ident.mirrors.remove(friend)
        for dev in ident.devices.values():
            for key in [k for k in dev.record_cache if k[0] == friend]:
                del dev.record_cache[key]
        for hook in ident.on_revoke:
            hook(friend)

    # --- locating ----------------------------------------------------------
    def _verify_record(self, rec: RegistrationRecord, expect_user: str, rv: Optional[RendezvousServer]) -> bool:
        if rec.username != expect_user:
            return False
        cert = self._cert_for(expect_user, rv)
        return cert is not None and rec.verify(cert.public_key, self.scheme)

    def locate_and_connect(self, friend: str, max_priority: Optional[int] = None) -> LocateResult:
        """Reach ``friend``'s profile: own devices first, then mirrors by rank."""
        ident = self.identity
        f = ident.friendships.get(friend)
        if f is None or f.state is not FriendState.ACTIVE or f.friend_token is None:
            raise InvalidTransition(f"{friend} is not an active friend")
        d = self.deployment
        rv = self._rendezvous() if self.connected() else None
        attempts = 0
        elapsed = 0
        events: list[T1Event] = []
        mirrors: Optional[tuple] = None
        last_error: Optional[Exception] = None
        priority = 0
        while True:
            if max_priority is not None and priority > max_priority:
                break
            if priority > MAX_SELF_PRIORITY:
                rank = priority - MIRROR_OFFSET
                if mirrors is not None and rank > len(mirrors):
                    break
                if mirrors is None and rank > MAX_MIRROR_PROBE:
                    break
            expected = friend
            if priority > MAX_SELF_PRIORITY and mirrors is not None:
                expected = dict((r, n) for n, r in mirrors).get(priority - MIRROR_OFFSET, "")
            record = None
            if rv is not None:
                try:
                    record = rv.locate_peer(f.friend_token, priority)
                    elapsed += 2 * d.net.latency(self.eid, rv.name)
                except NotFound as exc:
                    last_error = exc
                    if priority > MAX_SELF_PRIORITY and mirrors is None:
                        break
                    priority += 1
                    continue
                if priority > MAX_SELF_PRIORITY and mirrors is None:
                    expected = record.username
                if not self._verify_record(record, expected, rv) or (
                        priority > MAX_SELF_PRIORITY and record.username == friend):
                    ev = T1Event(rv.name, friend, priority, d.net.now)
                    events.append(ev)
                    self.t1_events.append(ev)
                    last_error = DigestMismatch(f"record for {friend}@{priority} failed verification")
                    priority += 1
                    continue
                if priority <= MAX_SELF_PRIORITY and mirrors is None:
                    mirrors = record.mirrors
                self.record_cache[(friend, priority)] = record
            else:
                record = self.record_cache.get((friend, priority))
                if record is None and priority > MAX_SELF_PRIORITY and mirrors is not None:
                    # a mirror is usually a friend too: its own cached record will do
                    name = dict((r, n) for n, r in mirrors).get(priority - MIRROR_OFFSET)
                    record = self.record_cache.get((name, 0)) if name else None
                if record is None:
                    if priority <= MAX_SELF_PRIORITY:
                        priority += 1
                        continue
                    break
                if priority <= MAX_SELF_PRIORITY and mirrors is None:
                    mirrors = record.mirrors
            attempts += 1
            try:
                channel = self.establish_secure_channel(record, friend, priority)
            except (Unreachable, UnknownSlot, PairBroken, Refused, AuthFailure, SessionFailed) as exc:
                last_error = exc
                elapsed += 2 * 2 * d.net.latency_ms  # two simulated round trips before escalating
                priority += 1
                continue
            channel.elapsed_ms += elapsed
            return LocateResult(channel, channel.serving, priority, attempts, channel.elapsed_ms, events)
        raise AllUnreachable(f"{friend}: no device or mirror reachable ({type(last_error).__name__ if last_error else 'none'})")

    def connect_sibling(self, priority: int) -> SecureChannel:
        """Channel to another device of the same user (self replication)."""
        if priority == self.priority or not 0 <= priority <= MAX_SELF_PRIORITY:
            raise ValueError(f"no sibling at priority {priority}")
        rv = self._rendezvous() if self.connected() else None
        record = None
        if rv is not None:
            try:
                record = rv.locate_peer(self.identity.self_token, priority)
            except NotFound:
                record = None
            if record is not None and not self._verify_record(record, self.username, rv):
                record = None
            if record is not None:
                self.record_cache[(self.username, priority)] = record
        else:
            record = self.record_cache.get((self.username, priority))
        if record is None:
            raise AllUnreachable(f"{self.username}#{priority} is not registered")
        try:
            return self.establish_secure_channel(record, self.username, priority)
        except (Unreachable, UnknownSlot, PairBroken, Refused, AuthFailure) as exc:
            raise AllUnreachable(f"{self.username}#{priority}: {type(exc).__name__}") from exc

    # --- channels ------------------------------------------------------------
    def establish_secure_channel(self, record: RegistrationRecord, target: str, priority: int = 0) -> SecureChannel:
        d = self.deployment
        if not self.connected():
            raise Unreachable(f"{self.eid} is offline")
        now = d.net.now
        relay = None
        conn_id = slot_port = None
        if record.relay_addr:
            relay = d.relay_by_ip.get(record.relay_addr)
            if relay is None or not d.reachable(self.eid, relay.name):
                raise Unreachable(f"relay {record.relay_addr} unreachable")
            slot = relay.slots.get(int(record.relay_port or 0))
            if slot is None or not relay.slot_alive(slot.slot_port, now):
                raise UnknownSlot(f"relay slot {record.relay_port} gone")
            server = d.devices.get(slot.owner[0]) if slot.owner else None
            if server is None:
                raise Unreachable("relay slot has no serving device")
            slot_port = slot.slot_port
            conn_id = relay.attach(self.eid, slot_port, now)
        else:
            dst, _ = d.net.check_path(self.eid, (record.ip, record.port))
            server = d.devices.get(dst.eid)
            if server is None:
                raise Unreachable(f"{record.ip}:{record.port} is not a peer")
        # certificate exchange, then the client's session key sealed to the server
        if not crypto.verify_certificate(server.identity.certificate, d.ca.public_key, self.scheme):
            raise AuthFailure("server certificate invalid")
        if server.username != record.username:
            raise AuthFailure("serving certificate does not match the located record")
        material = crypto.encode_fields([self.identity.keys.private_key, server.username, now, self.eid,
                                         d.next_nonce()])
        key = crypto.derive_session_key(material, now)
        sealed = crypto.seal_session_key(self.identity.keys.private_key, server.identity.keys.public_key, key,
                                         self.scheme)
        server_key = server.accept_channel(self.identity.certificate, sealed, target)
        if server_key != key:
            raise AuthFailure("session key mismatch")
        channel = SecureChannel(self, server, key, target, server.username, priority, relay, conn_id, slot_port,
                                server.endpoint.session)
        channel.elapsed_ms += channel._rtt() * 2
        return channel

    def accept_channel(self, client_cert: Certificate, sealed_key: bytes, target: str) -> SessionKey:
        """Serving side of the handshake."""
        d = self.deployment
        if not crypto.verify_certificate(client_cert, d.ca.public_key, self.scheme):
            raise AuthFailure("client certificate invalid")
        key = crypto.open_session_key(self.identity.keys.private_key, client_cert.public_key, sealed_key,
                                      self.scheme)
        if not self.allows(client_cert.username, target):
            raise Refused(f"{self.username} refuses {client_cert.username}")
        return key

    def allows(self, requester: str, target: str) -> bool:
        if self.authorize is not None:
            return self.authorize(requester, target)
        if target != self.username:
            return False
        return requester == self.username or self.identity.is_friend(requester)

    def serve_request(self, requester: str, target: str, payload: bytes) -> bytes:
        if self.app is None:
            return payload
        return self.app(requester, target, payload)


class Deployment:
    """Service layer on one simulated network."""

    def __init__(self, seed: int = 0, scheme: Scheme | None = None, net: Network | None = None,
                 ca_name: str = "myzone-ca"):
        self.scheme = scheme or crypto.TOY
        self.net = net or Network(seed=seed)
        self.ca = ca_mod.CertificateAuthority.from_seed(ca_name, seed * 7919 + 1, self.scheme)
        self.stun = DualHomedStun.install(self.net)
        self.rendezvous: dict[str, RendezvousServer] = {}
        self.rendezvous_by_addr: dict[tuple, RendezvousServer] = {}
        self.primary_rendezvous: Optional[tuple] = None
        self.relays: dict[tuple, RelayServer] = {}
        self.relay_by_ip: dict[str, RelayServer] = {}
        self.devices: dict[str, PeerDevice] = {}
        self.identities: dict[str, PeerIdentity] = {}
        self._seed = seed
        self._nonce = 0

    def next_nonce(self) -> int:
        self._nonce += 1
        return self._nonce

    def reachable(self, a: str, b: str) -> bool:
        ea, eb = self.net.endpoints[a], self.net.endpoints[b]
        return ea.online and eb.online and not self.net.partitioned(a, b)

    def add_rendezvous(self, name: str, config: RendezvousConfig | None = None, primary: bool = False) -> RendezvousServer:
        ep = self.net.add_endpoint(name, NatType.PUBLIC, port=(config or RendezvousConfig()).port)
        server = RendezvousServer(name, self.scheme.keypair(hash_seed(self._seed, name)), self.ca.public_key,
                                  config, self.scheme, cert_exists=self.ca.has_certificate)
        self.rendezvous[name] = server
        self.rendezvous_by_addr[ep.internal] = server
        if primary or self.primary_rendezvous is None:
            self.primary_rendezvous = ep.internal
        return server

    def rendezvous_order(self, preferred: Optional[tuple]) -> list[tuple]:
        order = [preferred] if preferred in self.rendezvous_by_addr else []
        if self.primary_rendezvous not in order:
            order.append(self.primary_rendezvous)
        order += sorted(a for a in self.rendezvous_by_addr if a not in order)
        return order

    def add_relay(self, name: str, config: RelayConfig | None = None, register_with: Optional[str] = None) -> RelayServer:
        config = config or RelayConfig()
        ep = self.net.add_endpoint(name, NatType.PUBLIC, port=config.port)
        relay = RelayServer(name, ep.internal[0], self.scheme.keypair(hash_seed(self._seed, name)),
                            self.ca.public_key, config, self.scheme)
        relay.liveness = self._slot_live
        self.relays[(relay.addr, relay.port)] = relay
        self.relay_by_ip[relay.addr] = relay
        rv = self.rendezvous[register_with] if register_with else self.rendezvous_by_addr.get(self.primary_rendezvous)
        if rv is not None:
            relay.register_with(rv, self.net.now)
        return relay

    def _slot_live(self, slot) -> bool:
        if not slot.owner:
            return True
        eid, session = slot.owner
        ep = self.net.endpoints.get(eid)
        return ep is not None and ep.online and ep.session == session

    def identity(self, username: str, seed: Optional[int] = None) -> PeerIdentity:
        if username not in self.identities:
            kp = self.scheme.keypair(seed if seed is not None else hash_seed(self._seed, "user/" + username))
            self.identities[username] = PeerIdentity(username, kp)
        return self.identities[username]

    def add_device(self, username: str, priority: int = 0, nat: NatType = NatType.PUBLIC,
                   online: bool = True) -> PeerDevice:
        dev = PeerDevice(self, self.identity(username), priority, nat, online)
        self.devices[dev.eid] = dev
        return dev

    def relay_heartbeats(self) -> None:
        rv = self.rendezvous_by_addr.get(self.primary_rendezvous)
        if rv is None or not self.net.endpoints[rv.name].online:
            return
        for key in sorted(self.relays):
            relay = self.relays[key]
            if self.reachable(relay.name, rv.name):
                try:
                    relay.heartbeat(rv, self.net.now)
                except MyZoneError:
                    relay.register_with(rv, self.net.now)


def hash_seed(seed: int, label: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}/{label}".encode()).digest()[:8], "big")

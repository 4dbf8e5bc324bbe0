"""Rendezvous server: signed registrations, passphrase lookup, relay
directory, friendship mailbox and backup synchronization.

Signed field layouts (each field encoded with :func:`myzone.wire.as_field`):

    conn_digest     [username, priority, ip, port, protocol, relay_addr,
                     relay_port, passphrases, nat_kind]
    mirrors_digest  [username, priority, [[mirror, rank], ...]]

The middle six connection fields are in the order the registration payload
lists them (IP, port, protocol, relay address, relay port, passphrase list).
Username and priority are prepended and the NAT kind appended so a record
cannot be replayed under another identity, slot or reachability class.

All state lives in one :class:`RendezvousState`; a snapshot is a deep copy of
it and backups rebuild themselves from that copy after re-verifying every
record.
"""

from __future__ import annotations

import copy
import ipaddress
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional

from . import crypto
from .crypto import Certificate, KeyPair, Scheme, SessionKey
from .errors import (BackupUnreachable, BadCertificate, DigestMismatch, NoBackupAlive, NoRelayAvailable,
                     NoSession, NotFound, UnknownRelay, UnknownTarget)

log = logging.getLogger(__name__)

MAX_SELF_PRIORITY = 2
MIRROR_OFFSET = 2  # rank-i mirror is located at priority i + 2


class NatKind(Enum):
    FULL_CONE = "FullCone"
    NON_FULL_CONE = "NonFullCone"
    PUBLIC_IP = "PublicIP"


class Protocol(Enum):
    TCP = "TCP"
    UDP = "UDP"


@dataclass(frozen=True)
class RegistrationRecord:
    username: str
    priority: int
    ip: str
    port: int
    nat_kind: NatKind
    protocol: Protocol = Protocol.UDP
    relay_addr: Optional[str] = None
    relay_port: Optional[int] = None
    passphrases: tuple = ()
    mirrors: tuple = ()  # ((username, rank), ...)
    conn_digest: bytes = b""
    mirrors_digest: bytes = b""
    registered_at: int = 0

    def conn_fields(self) -> list:
        return [self.username, self.priority, self.ip, self.port, self.protocol, self.relay_addr or "",
                self.relay_port or 0, list(self.passphrases), self.nat_kind]

    def mirror_fields(self) -> list:
        return [self.username, self.priority, [[m, r] for m, r in self.mirrors]]

    def signed(self, private_key: bytes, scheme: Scheme | None = None) -> "RegistrationRecord":
        return replace(self, conn_digest=crypto.sign_digest(private_key, self.conn_fields(), scheme),
                       mirrors_digest=crypto.sign_digest(private_key, self.mirror_fields(), scheme))

    def verify(self, public_key: bytes, scheme: Scheme | None = None) -> bool:
        return (crypto.verify_digest(public_key, self.conn_fields(), self.conn_digest, scheme)
                and crypto.verify_digest(public_key, self.mirror_fields(), self.mirrors_digest, scheme))

    @property
    def contact(self) -> tuple[str, int]:
        """Address a client should dial: the relay slot when one is listed."""
        if self.relay_addr:
            return (self.relay_addr, int(self.relay_port or 0))
        return (self.ip, self.port)

    def mirror_at(self, rank: int) -> Optional[str]:
        for name, r in self.mirrors:
            if r == rank:
                return name
        return None


@dataclass
class RelayRecord:
    addr: str
    port: int
    capacity: int
    load: int
    last_heartbeat: int


@dataclass(frozen=True)
class FriendshipRequest:
    requester: str
    sealed_passphrase: bytes
    submitted_at: int


@dataclass(frozen=True)
class RendezvousConfig:
    age_ms: int = 10 * 60_000
    refresh_interval_ms: int = 60_000
    registration_refresh_ms: int = 2 * 60_000
    port: int = 7000

    def __post_init__(self):
        if not 0 < self.refresh_interval_ms < self.age_ms:
            raise ValueError("relay refresh interval must be positive and less than age")
        if self.registration_refresh_ms <= 0:
            raise ValueError("registration refresh must be positive")


@dataclass
class RendezvousState:
    records: dict = field(default_factory=dict)        # (username, priority) -> RegistrationRecord
    certificates: dict = field(default_factory=dict)   # username -> Certificate
    passphrases: dict = field(default_factory=dict)    # token -> username
    user_tokens: dict = field(default_factory=dict)    # username -> tuple of tokens
    relays: dict = field(default_factory=dict)         # (addr, port) -> RelayRecord
    mailboxes: dict = field(default_factory=dict)      # username -> {requester: FriendshipRequest}
    primary_address: Optional[tuple] = None
    primary_address_at: int = -1


def _addr_key(addr: str, port: int):
    try:
        return (0, int(ipaddress.ip_address(addr)), port)
    except ValueError:
        return (1, addr, port)


class RendezvousServer:
    def __init__(self, name: str, keys: KeyPair, ca_public: bytes, config: RendezvousConfig | None = None,
                 scheme: Scheme | None = None, cert_exists: Callable[[str], bool] | None = None):
        self.name = name
        self.keys = keys
        self.ca_public = ca_public
        self.config = config or RendezvousConfig()
        self.scheme = scheme or crypto.get_scheme()
        self.cert_exists = cert_exists
        self.state = RendezvousState()
        self.sessions: dict[bytes, str] = {}
        self._session_counter = 0
        # adversary hook: (record) -> record, applied to locate replies
        self.reply_filter: Optional[Callable[[RegistrationRecord], RegistrationRecord]] = None

    @property
    def public_key(self) -> bytes:
        return self.keys.public_key

    # --- sessions ----------------------------------------------------
    def handshake(self, cert: Certificate, now: int = 0) -> bytes:
        """Verify ``cert`` and return a fresh session key sealed to its key."""
        if not crypto.verify_certificate(cert, self.ca_public, self.scheme):
            raise BadCertificate(f"certificate for {cert.username!r} not signed by the CA")
        self._session_counter += 1
        material = crypto.encode_fields([self.keys.private_key, self.name, self._session_counter, cert.username])
        key = crypto.derive_session_key(material, now)
        self.sessions[key.key] = cert.username
        self.state.certificates[cert.username] = cert
        return crypto.seal_session_key(self.keys.private_key, cert.public_key, key, self.scheme)

    def close_session(self, session: SessionKey) -> None:
        self.sessions.pop(session.key, None)

    def _session_user(self, session: SessionKey | None) -> str:
        if session is None or session.key not in self.sessions:
            raise NoSession("no session established")
        return self.sessions[session.key]

    # --- registration ------------------------------------------------
    def _record_verifies(self, record: RegistrationRecord, certs: dict) -> bool:
        cert = certs.get(record.username)
        if cert is None or not 0 <= record.priority <= MAX_SELF_PRIORITY:
            return False
        return record.verify(cert.public_key, self.scheme)

    def register_peer(self, record: RegistrationRecord, session: SessionKey, now: int = 0) -> list[FriendshipRequest]:
        """Store ``record``; returns (and clears) pending friendship requests."""
        user = self._session_user(session)
        st = self.state
        if record.username != user or not self._record_verifies(record, st.certificates):
            raise DigestMismatch(f"registration for {record.username!r} does not verify")
        record = replace(record, registered_at=now)
        st.records[(user, record.priority)] = record
        for token in st.user_tokens.get(user, ()):
            if st.passphrases.get(token) == user:
                del st.passphrases[token]
        st.user_tokens[user] = tuple(record.passphrases)
        for token in record.passphrases:
            st.passphrases[token] = user
        pending = st.mailboxes.pop(user, {})
        return [pending[k] for k in sorted(pending)]

    def unregister(self, username: str, priority: int) -> None:
        self.state.records.pop((username, priority), None)

    def locate_peer(self, passphrase: bytes, priority: int) -> RegistrationRecord:
        st = self.state
        user = st.passphrases.get(passphrase)
        if user is None or priority < 0:
            raise NotFound("unknown passphrase")
        if priority <= MAX_SELF_PRIORITY:
            record = st.records.get((user, priority))
        else:
            record = None
            owner = self._owner_record(user)
            mirror = owner.mirror_at(priority - MIRROR_OFFSET) if owner else None
            if mirror is not None:
                record = st.records.get((mirror, 0))
        if record is None:
            raise NotFound(f"no registration at priority {priority}")
        if self.reply_filter is not None:
            record = self.reply_filter(record)
        return record

    def _owner_record(self, user: str) -> Optional[RegistrationRecord]:
        """Most recent record of ``user`` (its mirror list is authoritative)."""
        found = [r for p in range(MAX_SELF_PRIORITY + 1) if (r := self.state.records.get((user, p)))]
        if not found:
            return None
        return max(found, key=lambda r: (r.registered_at, -r.priority))

    def certificate_of(self, username: str) -> Optional[Certificate]:
        return self.state.certificates.get(username)

    # --- friendship mailbox -----------------------------------------
    def submit_friendship_request(self, target: str, request: FriendshipRequest, session: SessionKey) -> None:
        user = self._session_user(session)
        if request.requester != user:
            raise NoSession("request not from the session holder")
        known = target in self.state.certificates or any(u == target for u, _ in self.state.records)
        if not known and self.cert_exists is not None:
            known = self.cert_exists(target)
        if not known:
            raise UnknownTarget(target)
        self.state.mailboxes.setdefault(target, {})[request.requester] = request

    def mailbox(self, username: str) -> list[FriendshipRequest]:
        box = self.state.mailboxes.get(username, {})
        return [box[k] for k in sorted(box)]

    # --- relay directory --------------------------------------------
    def register_relay(self, addr: str, port: int, capacity: int, now: int = 0) -> int:
        if capacity <= 0:
            raise ValueError("relay capacity must be positive")
        self.state.relays[(addr, port)] = RelayRecord(addr, port, capacity, 0, now)
        return self.config.refresh_interval_ms

    def relay_heartbeat(self, addr: str, load: int, capacity: int, port: int, now: int = 0) -> None:
        rec = self.state.relays.get((addr, port))
        if rec is None:
            raise UnknownRelay(f"{addr}:{port}")
        rec.capacity = capacity
        rec.load = max(0, min(load, capacity))
        rec.last_heartbeat = now

    def expire_relays(self, now: int) -> int:
        stale = [k for k, r in self.state.relays.items() if r.last_heartbeat < now - self.config.age_ms]
        for k in stale:
            del self.state.relays[k]
        return len(stale)

    def live_relays(self, now: int) -> list[RelayRecord]:
        cutoff = now - self.config.age_ms
        return [r for r in self.state.relays.values() if r.last_heartbeat >= cutoff]

    def request_relay(self, now: int = 0, exclude=()) -> tuple[str, int]:
        """Least loaded live relay; ties go to the lowest address.

        The chosen relay's load is bumped by one as a reservation until its
        next heartbeat reports the real figure.
        """
        candidates = [r for r in self.live_relays(now) if r.load < r.capacity and (r.addr, r.port) not in exclude]
        if not candidates:
            raise NoRelayAvailable("no live relay with spare capacity")
        best = min(candidates, key=lambda r: (r.load / r.capacity, _addr_key(r.addr, r.port)))
        best.load += 1
        return best.addr, best.port

    # --- backups -----------------------------------------------------
    def snapshot(self) -> RendezvousState:
        return copy.deepcopy(self.state)

    def load_snapshot(self, snap: RendezvousState) -> int:
        """Adopt ``snap`` after re-verifying; returns the number of dropped records."""
        snap = copy.deepcopy(snap)
        certs = {u: c for u, c in snap.certificates.items()
                 if crypto.verify_certificate(c, self.ca_public, self.scheme)}
        records = {k: r for k, r in snap.records.items() if k == (r.username, r.priority)
                   and self._record_verifies(r, certs)}
        dropped = len(snap.records) - len(records)
        snap.certificates = certs
        snap.records = records
        # keep only tokens vouched for by some verified record of their user
        vouched: dict[str, set] = {}
        for (user, _), r in records.items():
            vouched.setdefault(user, set()).update(r.passphrases)
        snap.user_tokens = {u: tuple(t for t in toks if t in vouched.get(u, ()))
                            for u, toks in snap.user_tokens.items() if u in vouched}
        snap.passphrases = {t: u for t, u in snap.passphrases.items() if t in snap.user_tokens.get(u, ())}
        keep_primary = self.state.primary_address_at > snap.primary_address_at
        if keep_primary:
            snap.primary_address = self.state.primary_address
            snap.primary_address_at = self.state.primary_address_at
        self.state = snap
        if dropped:
            log.info("%s dropped %d non-verifying records from snapshot", self.name, dropped)
        return dropped

    def sync_backups(self, backups: list["RendezvousServer"],
                     reachable: Callable[[str], bool] | None = None) -> dict[str, Optional[Exception]]:
        """Push a full snapshot to every backup; per-backup result (None = ack)."""
        snap = self.snapshot()
        results: dict[str, Optional[Exception]] = {}
        for b in backups:
            if reachable is not None and not reachable(b.name):
                results[b.name] = BackupUnreachable(b.name)
                continue
            b.load_snapshot(snap)
            results[b.name] = None
        return results

    def failover_announce(self, new_addr: tuple, backups: list["RendezvousServer"], now: int,
                          reachable: Callable[[str], bool] | None = None) -> int:
        """Tell every reachable backup the primary's new address."""
        alive = [b for b in backups if reachable is None or reachable(b.name)]
        if not alive:
            raise NoBackupAlive("no backup reachable")
        for b in alive:
            b.record_primary_address(tuple(new_addr), now)
        self.record_primary_address(tuple(new_addr), now)
        return len(alive)

    def record_primary_address(self, addr: tuple, at: int) -> None:
        if at >= self.state.primary_address_at:
            self.state.primary_address = addr
            self.state.primary_address_at = at

    def primary_address(self) -> Optional[tuple]:
        return self.state.primary_address

    # --- audit -------------------------------------------------------
    def audit(self) -> list[tuple[str, int]]:
        """Keys of stored records that fail verification (should be empty)."""
        bad = []
        for key in sorted(self.state.records):
            if not self._record_verifies(self.state.records[key], self.state.certificates):
                bad.append(key)
        for token, user in self.state.passphrases.items():
            if token not in self.state.user_tokens.get(user, ()):
                bad.append((user, -1))
        return bad


def open_session(peer_keys: KeyPair, server: RendezvousServer, cert: Certificate, now: int = 0) -> SessionKey:
    """Client side of the handshake."""
    blob = server.handshake(cert, now)
    return crypto.open_session_key(peer_keys.private_key, server.public_key, blob, server.scheme)

"""Relay server for peers that cannot accept inbound connections.

A serving peer proves key ownership by recovering a sealed timestamp, then
holds a slot. Each slot gets its own relayed port on the relay's public
address (an allocation, as in TURN); clients reach the serving peer by
attaching to that port. The relay pairs connections and forwards opaque
frames; it never holds a session key.

Control messages are tagged records (one tag byte + length-prefixed fields,
see :mod:`myzone.wire`):

    0x01 CHALLENGE        [certificate]                  -> [sealed timestamp]
    0x02 REGISTER         [certificate, timestamp]       -> [slot_port, ping_interval_ms]
    0x03 SERVER_IS_ALIVE  [slot_port]                    -> []
    0x04 ATTACH           [slot_port, client_id]         -> [conn_id]
    0x05 DATA             [conn_id, side, frame]         -> []

Replies are ``0x80 | tag`` on success, or ``0xFF [error class, message]``.
Frames are a 4-byte big-endian length followed by the opaque body.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import crypto
from .crypto import Certificate, KeyPair, Scheme
from .errors import (AuthFailure, CapacityExhausted, MalformedRequest, MyZoneError, PairBroken, ReplayDetected,
                     UnknownSlot)
from .wire import decode_record, encode_record, field_int, field_str, frame, unframe

log = logging.getLogger(__name__)

TAG_CHALLENGE = 0x01
TAG_REGISTER = 0x02
TAG_ALIVE = 0x03
TAG_ATTACH = 0x04
TAG_DATA = 0x05
TAG_ERROR = 0xFF

SERVER_SIDE = 0
CLIENT_SIDE = 1


@dataclass(frozen=True)
class RelayConfig:
    rendezvous_addr: str = ""
    rendezvous_port: int = 7000
    port: int = 7100
    max_connections: int = 20
    ping_interval_ms: int = 30_000
    slot_port_base: int = 50_000

    def __post_init__(self):
        if self.ping_interval_ms <= 0:
            raise ValueError("ping interval must be positive")
        if self.max_connections <= 0:
            raise ValueError("max_connections must be positive")

    @property
    def grace_ms(self) -> int:
        return 2 * self.ping_interval_ms


@dataclass
class ServingSlot:
    username: str
    certificate: Certificate
    last_alive: int
    slot_port: int
    pending_clients: deque = field(default_factory=deque)
    owner: object = None  # opaque handle used by the liveness probe


@dataclass
class RelayedConnection:
    conn_id: int
    slot_port: int
    client: str
    queues: tuple = field(default_factory=lambda: (deque(), deque()))
    forwarded: int = 0


class RelayServer:
    def __init__(self, name: str, addr: str, keys: KeyPair, ca_public: bytes, config: RelayConfig | None = None,
                 scheme: Scheme | None = None):
        self.name = name
        self.addr = addr
        self.keys = keys
        self.ca_public = ca_public
        self.config = config or RelayConfig()
        self.scheme = scheme or crypto.get_scheme()
        self.slots: dict[int, ServingSlot] = {}
        self.connections: dict[int, RelayedConnection] = {}
        self._challenges: dict[bytes, str] = {}
        self._used: set[bytes] = set()
        self._counter = 0
        self._next_port = self.config.slot_port_base
        self._next_conn = 0
        self.bytes_forwarded = 0
        self.frames_forwarded = 0
        # returns False once the serving peer's connection to the relay is gone
        self.liveness: Optional[Callable[[ServingSlot], bool]] = None

    @property
    def port(self) -> int:
        return self.config.port

    @property
    def load(self) -> int:
        return len(self.slots)

    # --- serving side ------------------------------------------------
    def challenge(self, cert: Certificate, now: int) -> bytes:
        """Fresh timestamp sealed to the certificate's key."""
        if not crypto.verify_certificate(cert, self.ca_public, self.scheme):
            raise AuthFailure("certificate not signed by the CA")
        self._counter += 1
        stamp = crypto.encode_fields([now, self._counter, self.name])
        self._challenges[stamp] = cert.username
        return crypto.seal(self.keys.private_key, cert.public_key, stamp, self.scheme)

    def answer_challenge(self, keys: KeyPair, sealed: bytes) -> bytes:
        """Serving-peer side: recover the timestamp with the private key."""
        return crypto.open_sealed(keys.private_key, self.keys.public_key, sealed, self.scheme)

    def accept_server_peer(self, cert: Certificate, response: bytes, now: int, owner: object = None) -> tuple[int, int]:
        """Grant a slot; returns ``(slot_port, ping_interval_ms)``."""
        self.expire_slots(now)
        if len(self.slots) >= self.config.max_connections:
            raise CapacityExhausted(f"{self.name} holds {len(self.slots)} slots")
        if not crypto.verify_certificate(cert, self.ca_public, self.scheme):
            raise AuthFailure("certificate not signed by the CA")
        if response in self._used:
            raise ReplayDetected("challenge already used")
        if self._challenges.get(response) != cert.username:
            raise AuthFailure("challenge response does not match")
        del self._challenges[response]
        self._used.add(response)
        self._next_port += 1
        slot = ServingSlot(cert.username, cert, now, self._next_port, owner=owner)
        self.slots[slot.slot_port] = slot
        return slot.slot_port, self.config.ping_interval_ms

    def keep_alive(self, slot_port: int, now: int) -> None:
        slot = self.slots.get(slot_port)
        if slot is None or now - slot.last_alive > self.config.grace_ms:
            self._drop(slot_port)
            raise UnknownSlot(f"no slot on port {slot_port}")
        slot.last_alive = now

    def release(self, slot_port: int) -> None:
        self._drop(slot_port)

    def _drop(self, slot_port: int) -> None:
        if self.slots.pop(slot_port, None) is not None:
            for cid in [c for c, conn in self.connections.items() if conn.slot_port == slot_port]:
                del self.connections[cid]

    def expire_slots(self, now: int) -> int:
        dead = [p for p, s in self.slots.items()
                if now - s.last_alive > self.config.grace_ms or (self.liveness is not None and not self.liveness(s))]
        for p in dead:
            self._drop(p)
        return len(dead)

    def slot_alive(self, slot_port: int, now: int) -> bool:
        slot = self.slots.get(slot_port)
        if slot is None:
            return False
        if now - slot.last_alive > self.config.grace_ms or (self.liveness is not None and not self.liveness(slot)):
            self._drop(slot_port)
            return False
        return True

    # --- client side -------------------------------------------------
    def attach(self, client: str, slot_port: int, now: int) -> int:
        if not self.slot_alive(slot_port, now):
            raise UnknownSlot(f"no serving peer on port {slot_port}")
        self._next_conn += 1
        conn = RelayedConnection(self._next_conn, slot_port, client)
        self.connections[conn.conn_id] = conn
        self.slots[slot_port].pending_clients.append(conn.conn_id)
        return conn.conn_id

    def serving_username(self, slot_port: int) -> Optional[str]:
        slot = self.slots.get(slot_port)
        return slot.username if slot else None

    def forward(self, conn_id: int, body: bytes, from_side: int, now: int) -> None:
        """Queue ``body`` verbatim for the other side of ``conn_id``."""
        conn = self.connections.get(conn_id)
        if conn is None or not self.slot_alive(conn.slot_port, now):
            self.connections.pop(conn_id, None)
            raise PairBroken(f"connection {conn_id} lost its serving peer")
        conn.queues[1 - from_side].append(frame(body))
        conn.forwarded += 1
        self.frames_forwarded += 1
        self.bytes_forwarded += len(body)

    def receive(self, conn_id: int, side: int) -> list[bytes]:
        conn = self.connections.get(conn_id)
        if conn is None:
            raise PairBroken(f"connection {conn_id} is closed")
        out = []
        q = conn.queues[side]
        while q:
            body, rest = unframe(q.popleft())
            out.append(body)
        return out

    def close(self, conn_id: int) -> None:
        self.connections.pop(conn_id, None)

    # --- rendezvous ----------------------------------------------------
    def register_with(self, rendezvous, now: int) -> int:
        return rendezvous.register_relay(self.addr, self.port, self.config.max_connections, now)

    def heartbeat(self, rendezvous, now: int) -> None:
        self.expire_slots(now)
        rendezvous.relay_heartbeat(self.addr, self.load, self.config.max_connections, self.port, now)

    # --- wire --------------------------------------------------------
    def handle_control(self, message: bytes, now: int) -> bytes:
        try:
            tag, fields = decode_record(message)
            if tag == TAG_CHALLENGE:
                return encode_record(0x80 | tag, [self.challenge(Certificate.from_bytes(fields[0]), now)])
            if tag == TAG_REGISTER:
                port, ping = self.accept_server_peer(Certificate.from_bytes(fields[0]), fields[1], now)
                return encode_record(0x80 | tag, [port, ping])
            if tag == TAG_ALIVE:
                self.keep_alive(field_int(fields[0]), now)
                return encode_record(0x80 | tag, [])
            if tag == TAG_ATTACH:
                return encode_record(0x80 | tag, [self.attach(field_str(fields[1]), field_int(fields[0]), now)])
            if tag == TAG_DATA:
                self.forward(field_int(fields[0]), fields[2], field_int(fields[1]), now)
                return encode_record(0x80 | tag, [])
            raise MalformedRequest(f"unknown tag {tag:#x}")
        except IndexError:
            return encode_record(TAG_ERROR, ["MalformedRequest", "missing field"])
        except MyZoneError as exc:
            return encode_record(TAG_ERROR, [type(exc).__name__, str(exc)])

    def dump_state(self) -> bytes:
        """Everything the relay holds, for opacity audits."""
        parts = [self.name.encode(), self.addr.encode()]
        for port in sorted(self.slots):
            s = self.slots[port]
            parts += [s.username.encode(), s.certificate.to_bytes(), str(s.last_alive).encode()]
        for cid in sorted(self.connections):
            c = self.connections[cid]
            parts.append(c.client.encode())
            for q in c.queues:
                parts.extend(q)
        parts += list(self._challenges) + sorted(self._used)
        return b"\n".join(parts)

"""Complaint-based isolation of misbehaving rendezvous servers.

A friend that got bad connection info for a peer from server X sends the
peer a signed notification. Once a peer holds enough notifications about X
it files one signed, timestamped complaint. Only peers registered with X may
complain about it, once each; X is isolated when the number of distinct
accepted complaints reaches ``r_threshold``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

from .. import crypto
from ..crypto import KeyPair, Scheme
from ..errors import BadSignature, DuplicateComplaint, NotRegisteredWithServer, StaleTimestamp
from .ring import ChordRing

DEFAULT_FRESHNESS_MS = 120_000  # one registration refresh
DEFAULT_NOTIFY_THRESHOLD = 2

RETAINED = "retained"
ISOLATED = "isolated"


@dataclass(frozen=True)
class Notification:
    """Friend ``reporter`` tells ``subject`` that ``server`` misreported it."""

    reporter: str
    subject: str
    server: str
    priority: int
    at: int
    signature: bytes = b""

    def fields(self) -> list:
        return ["notify", self.reporter, self.subject, self.server, self.priority, self.at]

    def signed(self, keys: KeyPair, scheme: Scheme | None = None) -> "Notification":
        return Notification(self.reporter, self.subject, self.server, self.priority, self.at,
                            crypto.sign_digest(keys.private_key, self.fields(), scheme))

    def verify(self, public_key: bytes, scheme: Scheme | None = None) -> bool:
        return crypto.verify_digest(public_key, self.fields(), self.signature, scheme)


@dataclass(frozen=True)
class Complaint:
    complainant: str
    about: str
    timestamp: int
    evidence: tuple = ()
    signature: bytes = b""

    def fields(self) -> list:
        ev = [crypto.encode_fields(n.fields() + [n.signature]) for n in self.evidence]
        return ["complaint", self.complainant, self.about, self.timestamp, ev]

    def signed(self, keys: KeyPair, scheme: Scheme | None = None) -> "Complaint":
        return Complaint(self.complainant, self.about, self.timestamp, tuple(self.evidence),
                         crypto.sign_digest(keys.private_key, self.fields(), scheme))

    def verify(self, public_key: bytes, scheme: Scheme | None = None) -> bool:
        return crypto.verify_digest(public_key, self.fields(), self.signature, scheme)


@dataclass
class LogRecord:
    at: int
    complainant: str
    about: str
    status: str  # "accepted" or the error class name
    evidence: int = 0

    def to_json(self) -> str:
        return json.dumps({"at": self.at, "complainant": self.complainant, "about": self.about,
                           "status": self.status, "evidence": self.evidence}, sort_keys=True)


class ComplaintBoard:
    """Collects complaints for one ring and decides isolation.

    ``public_key_of(username)`` resolves certified keys (``None`` if unknown).
    """

    def __init__(self, ring: ChordRing, public_key_of: Callable[[str], Optional[bytes]], r_threshold: int = 1,
                 freshness_ms: int = DEFAULT_FRESHNESS_MS, scheme: Scheme | None = None):
        if r_threshold < 1:
            raise ValueError("r_threshold must be at least 1")
        self.ring = ring
        self.public_key_of = public_key_of
        self.r_threshold = r_threshold
        self.freshness_ms = freshness_ms
        self.scheme = scheme
        self.accepted: dict[str, dict[str, Complaint]] = {}  # about -> complainant -> complaint
        self.log: list[LogRecord] = []
        self.spread: dict[str, list[str]] = {}  # accused -> nodes told about the verdict

    def _check(self, c: Complaint, now: int) -> None:
        pub = self.public_key_of(c.complainant)
        if pub is None or not c.verify(pub, self.scheme):
            raise BadSignature(f"complaint from {c.complainant} does not verify")
        for n in c.evidence:
            npub = self.public_key_of(n.reporter)
            if npub is None or n.subject != c.complainant or n.server != c.about or not n.verify(npub, self.scheme):
                raise BadSignature(f"notification from {n.reporter} does not back this complaint")
        if c.timestamp > now or now - c.timestamp > self.freshness_ms:
            raise StaleTimestamp(f"complaint stamped {c.timestamp}, now {now}")
        try:
            node = self.ring.by_address(c.about)
        except KeyError:
            raise NotRegisteredWithServer(f"{c.about} is not a ring server") from None
        if c.complainant not in node.registrations:
            raise NotRegisteredWithServer(f"{c.complainant} is not registered with {c.about}")
        if c.complainant in self.accepted.get(c.about, {}):
            raise DuplicateComplaint(f"{c.complainant} already complained about {c.about}")

    def file_complaint(self, complaint: Complaint, now: int) -> str:
        """Accept or raise; every outcome goes to the log."""
        try:
            self._check(complaint, now)
        except (BadSignature, StaleTimestamp, NotRegisteredWithServer, DuplicateComplaint) as exc:
            self.log.append(LogRecord(now, complaint.complainant, complaint.about, type(exc).__name__,
                                      len(complaint.evidence)))
            raise
        self.accepted.setdefault(complaint.about, {})[complaint.complainant] = complaint
        self.log.append(LogRecord(now, complaint.complainant, complaint.about, "accepted", len(complaint.evidence)))
        return "accepted"

    def distinct_complaints(self, about: str) -> int:
        return len(self.accepted.get(about, {}))

    def ring_judge(self, about: str) -> str:
        if self.distinct_complaints(about) < self.r_threshold:
            return RETAINED
        if about in self.ring.isolated:
            return ISOLATED
        node = self.ring.by_address(about)
        # the verdict travels to every node that routes through the accused
        self.spread[about] = sorted(n.address for n in self.ring.holders_of(node))
        self.ring.isolate(node)
        return ISOLATED

    def judge_all(self) -> dict[str, str]:
        """Deterministic fold over everything complained about so far."""
        return {about: self.ring_judge(about) for about in sorted(self.accepted)}

    def export_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.log)


@dataclass
class Complainer:
    """Peer side: gathers notifications and files once per server."""

    username: str
    keys: KeyPair
    threshold: int = DEFAULT_NOTIFY_THRESHOLD
    scheme: Scheme | None = None
    pending: dict = field(default_factory=dict)  # server -> {reporter: Notification}
    filed: set = field(default_factory=set)

    def notify(self, n: Notification, now: int) -> Optional[Complaint]:
        """Record ``n``; returns a complaint when the threshold is reached."""
        if n.subject != self.username or n.server in self.filed:
            return None
        got = self.pending.setdefault(n.server, {})
        got.setdefault(n.reporter, n)
        if len(got) < self.threshold:
            return None
        self.filed.add(n.server)
        evidence = tuple(got[k] for k in sorted(got))
        return Complaint(self.username, n.server, now, evidence).signed(self.keys, self.scheme)

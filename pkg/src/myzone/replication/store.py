"""Paged profile store with zones, tombstones and delta extraction.

Entry ids are creation timestamps in virtual ms, unique within a profile.
Pages hold ``entries_per_page`` consecutive ids; the history log has one
``(first_id, last_id, count)`` row per page.

Visibility: the owner sees everything. A friend sees an entry when it is in
the entry's zone (``All`` holds every active friend). Comments, likes and
dislikes take the zone of the entry they react to; a tombstone is visible to
whoever could see the entry it deletes. Messages are shared with ``@name``
and visible to that user and the author only. An unknown zone or a missing
parent fails closed.
"""

from __future__ import annotations

import base64
import bisect
import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

from ..errors import MalformedRequest, PermissionDenied, UnknownId
from ..wire import decode_fields, encode_fields, field_int, field_str

ALL = "All"
MIN_PAGE, MAX_PAGE, DEFAULT_PAGE = 100, 1000, 100


class EntryKind(Enum):
    WALL_POST = "WallPost"
    LINK = "Link"
    PHOTO = "Photo"
    AUDIO = "Audio"
    VIDEO = "Video"
    STATUS = "Status"
    COMMENT = "Comment"
    LIKE = "Like"
    DISLIKE = "Dislike"
    EVENT = "Event"
    MESSAGE = "Message"
    DELETED = "DeletedEntry"


REACTIONS = frozenset({EntryKind.COMMENT, EntryKind.LIKE, EntryKind.DISLIKE})


def message_zone(recipient: str) -> str:
    return "@" + recipient


@dataclass(frozen=True)
class ProfileEntry:
    id: int
    kind: EntryKind
    author: str
    shared_with: str
    body: bytes = b""
    parent_id: Optional[int] = None  # reacted-to entry, or the deleted entry for tombstones

    @property
    def is_tombstone(self) -> bool:
        return self.kind is EntryKind.DELETED

    def with_id(self, new_id: int) -> "ProfileEntry":
        return ProfileEntry(new_id, self.kind, self.author, self.shared_with, self.body, self.parent_id)

    def fields(self) -> list:
        return [self.id, self.kind.value, self.author, self.shared_with, self.body,
                -1 if self.parent_id is None else self.parent_id]

    def to_bytes(self) -> bytes:
        return encode_fields(self.fields())

    @property
    def size(self) -> int:
        return len(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "ProfileEntry":
        try:
            eid, kind, author, zone, body, parent = decode_fields(data)
            p = field_int(parent)
            return cls(field_int(eid), EntryKind(field_str(kind)), field_str(author), field_str(zone), body,
                       None if p < 0 else p)
        except (ValueError, MalformedRequest) as exc:
            raise MalformedRequest(f"bad entry encoding: {exc}") from exc

    # canonical text line used by the on-disk layout
    def to_line(self) -> str:
        parent = "-" if self.parent_id is None else str(self.parent_id)
        body = base64.b64encode(self.body).decode("ascii")
        return "\t".join([str(self.id), self.kind.value, self.author, self.shared_with, parent, body])

    @classmethod
    def from_line(cls, line: str) -> "ProfileEntry":
        try:
            eid, kind, author, zone, parent, body = line.rstrip("\n").split("\t")
            return cls(int(eid), EntryKind(kind), author, zone, base64.b64decode(body, validate=True),
                       None if parent == "-" else int(parent))
        except ValueError as exc:
            raise MalformedRequest(f"bad entry line: {exc}") from exc


def encode_entries(entries: Iterable[ProfileEntry]) -> bytes:
    return encode_fields([e.to_bytes() for e in entries])


def decode_entries(data: bytes) -> list[ProfileEntry]:
    return [ProfileEntry.from_bytes(b) for b in decode_fields(data)]


@dataclass(frozen=True)
class HistoryRow:
    first_id: int
    last_id: int
    count: int


@dataclass(frozen=True)
class DeltaBundle:
    for_friend: str
    since: int
    entries: tuple
    produced_at: int
    watermark: int            # newest id in the serving store
    first_available: int = 0  # oldest id held (truncated images start late)
    complete: bool = True     # the serving store holds the whole profile

    def to_bytes(self) -> bytes:
        return encode_fields([self.for_friend, self.since, self.produced_at, self.watermark,
                              self.first_available, int(self.complete), encode_entries(self.entries)])

    @classmethod
    def from_bytes(cls, data: bytes) -> "DeltaBundle":
        try:
            friend, since, at, wm, first, complete, body = decode_fields(data)
        except ValueError as exc:
            raise MalformedRequest("bad bundle") from exc
        return cls(field_str(friend), field_int(since), tuple(decode_entries(body)), field_int(at), field_int(wm),
                   field_int(first), bool(field_int(complete)))


def ids_digest(ids: Iterable[int]) -> bytes:
    h = hashlib.sha256(b"myzone/ids")
    for i in ids:
        h.update(i.to_bytes(8, "big"))
    return h.digest()[:16]


@dataclass
class Profile:
    owner: str
    entries_per_page: int = DEFAULT_PAGE
    zones: dict = field(default_factory=dict)     # name -> set of usernames
    friends: set = field(default_factory=set)     # active friends
    complete: bool = True                         # False for capacity-truncated mirror images

    def __post_init__(self):
        if not MIN_PAGE <= self.entries_per_page <= MAX_PAGE:
            raise ValueError(f"entries per page must be in [{MIN_PAGE}, {MAX_PAGE}]")
        self.zones = {k: set(v) for k, v in self.zones.items() if k != ALL}
        self.friends = set(self.friends)
        self._by_id: dict[int, ProfileEntry] = {}
        self._ids: list[int] = []
        self.deleted: dict[int, int] = {}  # deleted id -> tombstone id

    # --- zones ----------------------------------------------------------
    def zone_names(self) -> list[str]:
        return [ALL] + sorted(self.zones)

    def members(self, zone: str) -> Optional[set]:
        if zone == ALL:
            return self.friends
        return self.zones.get(zone)

    def set_zone(self, name: str, members: Iterable[str]) -> None:
        if name == ALL:
            raise ValueError("the All zone is derived from the friend list")
        self.zones[name] = set(members)

    # --- paging ---------------------------------------------------------
    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, entry_id: int) -> bool:
        return entry_id in self._by_id

    @property
    def last_id(self) -> int:
        return self._ids[-1] if self._ids else 0

    @property
    def first_id(self) -> int:
        return self._ids[0] if self._ids else 0

    def ids(self) -> list[int]:
        return list(self._ids)

    def entries(self) -> list[ProfileEntry]:
        return [self._by_id[i] for i in self._ids]

    def get(self, entry_id: int) -> Optional[ProfileEntry]:
        return self._by_id.get(entry_id)

    def pages(self) -> list[list[ProfileEntry]]:
        n = self.entries_per_page
        es = self.entries()
        return [es[i:i + n] for i in range(0, len(es), n)]

    def history(self) -> list[HistoryRow]:
        return [HistoryRow(p[0].id, p[-1].id, len(p)) for p in self.pages()]

    def size_bytes(self) -> int:
        return sum(e.size for e in self._by_id.values())

    def next_id(self, now: int) -> int:
        return max(now, self.last_id + 1)

    def _insert(self, entry: ProfileEntry) -> None:
        if entry.id not in self._by_id:
            bisect.insort(self._ids, entry.id)
        self._by_id[entry.id] = entry
        if entry.is_tombstone and entry.parent_id is not None:
            self.deleted[entry.parent_id] = entry.id

    def append_entry(self, entry: ProfileEntry) -> int:
        if entry.id <= self.last_id:
            raise ValueError(f"id {entry.id} is not after {self.last_id}")
        self._insert(entry)
        return entry.id

    def delete_entry(self, entry_id: int, by: str, now: int) -> ProfileEntry:
        target = self._by_id.get(entry_id)
        if target is None or target.is_tombstone or entry_id in self.deleted:
            raise UnknownId(f"no live entry {entry_id} in {self.owner}'s profile")
        if by != self.owner and by != target.author:
            raise PermissionDenied(f"{by} may not delete entry {entry_id}")
        tomb = ProfileEntry(self.next_id(now), EntryKind.DELETED, by, target.shared_with, b"", entry_id)
        self._insert(tomb)
        return tomb

    def read(self) -> list[ProfileEntry]:
        """Live content: no tombstones, nothing deleted."""
        return [e for e in self.entries() if not e.is_tombstone and e.id not in self.deleted]

    # --- visibility -------------------------------------------------------
    def zone_of(self, entry: ProfileEntry) -> Optional[str]:
        """Effective zone, following reactions and tombstones to their root."""
        seen = set()
        while entry.kind in REACTIONS or entry.is_tombstone:
            if entry.parent_id is None or entry.parent_id in seen:
                return None
            seen.add(entry.parent_id)
            parent = self._by_id.get(entry.parent_id)
            if parent is None:
                return None
            entry = parent
        return entry.shared_with

    def visible_to(self, entry: ProfileEntry, friend: str) -> bool:
        if friend == self.owner:
            return True
        zone = self.zone_of(entry)
        if zone is None:
            return False
        if zone.startswith("@"):
            return friend in (zone[1:], entry.author) and friend in self.friends
        members = self.members(zone)
        return members is not None and friend in members and friend in self.friends

    def can_write(self, writer: str, entry: ProfileEntry) -> bool:
        if entry.author != writer or entry.is_tombstone:
            return False
        if writer == self.owner:
            return True
        if writer not in self.friends:
            return False
        if entry.kind is EntryKind.MESSAGE:
            return entry.shared_with == message_zone(self.owner)
        if entry.kind in REACTIONS:
            parent = self._by_id.get(entry.parent_id) if entry.parent_id is not None else None
            return parent is not None and parent.id not in self.deleted and self.visible_to(parent, writer)
        members = self.members(entry.shared_with)
        return members is not None and writer in members

    def absorb(self, entry: ProfileEntry, writer: str, now: int) -> ProfileEntry:
        """Store a post from ``writer`` under a fresh id."""
        if not self.can_write(writer, entry):
            raise PermissionDenied(f"{writer} may not write to {entry.shared_with!r} on {self.owner}'s profile")
        stored = entry.with_id(self.next_id(now))
        self._insert(stored)
        return stored

    # --- deltas -------------------------------------------------------------
    def delta_entries(self, friend: str, since: int, until: Optional[int] = None) -> list[ProfileEntry]:
        start = bisect.bisect_right(self._ids, since)
        end = len(self._ids) if until is None else bisect.bisect_left(self._ids, until)
        out = []
        for i in self._ids[start:end]:
            e = self._by_id[i]
            if i in self.deleted:
                continue
            if self.visible_to(e, friend):
                out.append(e)
        return out

    def compute_delta(self, friend: str, since: int, now: int = 0) -> DeltaBundle:
        return DeltaBundle(friend, since, tuple(self.delta_entries(friend, since)), now, self.last_id,
                           self.first_id, self.complete)

    # --- replication ----------------------------------------------------------
    def merge(self, entries: Iterable[ProfileEntry]) -> int:
        """Union by id; a tombstone beats content at the same id. Returns #new."""
        added = 0
        for e in entries:
            cur = self._by_id.get(e.id)
            if cur is None:
                added += 1
                self._insert(e)
            elif cur != e:
                if e.is_tombstone and not cur.is_tombstone:
                    self._insert(e)
                elif e.is_tombstone == cur.is_tombstone and e.to_bytes() > cur.to_bytes():
                    self._insert(e)  # deterministic pick on an id collision
        return added

    def newest_suffix(self, capacity_bytes: Optional[int]) -> list[ProfileEntry]:
        """Longest run of newest entries whose total size fits the capacity."""
        es = self.entries()
        if capacity_bytes is None:
            return es
        total, start = 0, len(es)
        while start > 0 and total + es[start - 1].size <= capacity_bytes:
            start -= 1
            total += es[start].size
        return es[start:]

    def replace_image(self, entries: Iterable[ProfileEntry], complete: bool) -> None:
        self._by_id.clear()
        self._ids.clear()
        self.deleted.clear()
        for e in entries:
            self._insert(e)
        self.complete = complete

    def meta_bytes(self) -> bytes:
        zones = [[name, sorted(self.zones[name])] for name in sorted(self.zones)]
        return encode_fields([self.owner, self.entries_per_page, sorted(self.friends),
                              encode_fields([encode_fields([n, m]) for n, m in zones])])

    def load_meta(self, data: bytes) -> None:
        owner, _, friends, zones = decode_fields(data)
        if field_str(owner) != self.owner:
            raise MalformedRequest("profile meta for another owner")
        self.friends = {field_str(f) for f in decode_fields(friends)}
        self.zones = {}
        for z in decode_fields(zones):
            name, members = decode_fields(z)
            self.zones[field_str(name)] = {field_str(m) for m in decode_fields(members)}

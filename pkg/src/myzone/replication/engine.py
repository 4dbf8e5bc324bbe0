"""Per-device replication engine.

Client side: pull friends' deltas, deliver queued posts, sync the user's
profile with its replicas (the user's other devices and its ranked mirrors).
Server side: serve deltas, absorb posts and hold mirrored profile images;
installed as the device's ``app``/``authorize`` hooks so every exchange runs
over a :class:`~myzone.peer.SecureChannel`.

Requests are field lists (see :mod:`myzone.wire`), first field the op:

    pull       [target, since]                 -> [bundle]
    range      [target, lo, hi]                -> [bundle]
    post       [target, entry]                 -> [stored id]
    sync-probe [target, digest, capacity]      -> [match] or [no, ids]
    sync-fetch [target, ids]                   -> [entries]
    sync-push  [target, meta, entries, capacity, complete] -> []

Errors come back as ``["error", class name, message]``.

Replica sync is anti-entropy over entry-id sets: the syncing device probes a
replica with the digest of what the replica should hold (its capacity-bound
newest suffix plus zone metadata). On a mismatch it fetches the entries it
lacks (posts the replica absorbed), merges, and pushes what the replica is
missing; the replica merges and truncates to its capacity.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional

from .. import crypto
from ..errors import (AllUnreachable, InvalidTransition, MalformedRequest, MyZoneError, NotFriend, PermissionDenied,
                      Refused, SessionFailed)
from ..peer import MAX_SELF_PRIORITY, PeerDevice
from ..sessionlog import Action, RetryTracker, SessionLogEntry, Status
from ..wire import decode_fields, encode_fields, field_int, field_str
from .store import DeltaBundle, EntryKind, Profile, ProfileEntry, decode_entries, encode_entries, ids_digest, \
    message_zone

log = logging.getLogger(__name__)

OK = b"ok"
ERROR = b"error"


@dataclass(frozen=True)
class ReplicationSettings:
    entries_per_page: int = 100
    sync_period_ms: int = 300_000          # 5 virtual minutes
    refresh_interval_ms: int = 1_800_000   # 30 virtual minutes
    cache_limit_bytes: int = 64 * 1024 * 1024

    def __post_init__(self):
        if self.sync_period_ms <= 0 or self.refresh_interval_ms <= 0:
            raise ValueError("periods must be positive")


@dataclass
class FriendCache:
    entries: dict = field(default_factory=dict)   # id -> ProfileEntry
    watermark: int = 0
    gaps: list = field(default_factory=list)      # open id ranges (lo, hi) to refetch

    def live(self) -> list[ProfileEntry]:
        dead = {e.parent_id for e in self.entries.values() if e.is_tombstone}
        return [self.entries[i] for i in sorted(self.entries) if i not in dead and not self.entries[i].is_tombstone]


@dataclass
class PendingPost:
    target: str
    entry: ProfileEntry  # id is the local creation stamp, the dedup key


@dataclass
class DeniedPost:
    target: str
    entry: ProfileEntry
    reason: str
    at: int


@dataclass
class SyncReport:
    reached: list = field(default_factory=list)
    unreachable: list = field(default_factory=list)
    fetched: int = 0
    pushed: int = 0
    bytes: int = 0


def _error(exc: Exception) -> bytes:
    return encode_fields([ERROR, type(exc).__name__, str(exc)])


def _check(reply: bytes) -> list[bytes]:
    parts = decode_fields(reply)
    if not parts:
        raise MalformedRequest("empty reply")
    if parts[0] == ERROR:
        cls = field_str(parts[1])
        if cls == "PermissionDenied":
            raise PermissionDenied(field_str(parts[2]))
        raise SessionFailed(f"{cls}: {field_str(parts[2])}")
    return parts[1:]


class ReplicaEngine:
    def __init__(self, device: PeerDevice, settings: ReplicationSettings | None = None,
                 sink: Optional[Callable[[SessionLogEntry], None]] = None):
        self.device = device
        self.settings = settings or ReplicationSettings()
        ident = device.identity
        self.profile = Profile(ident.username, self.settings.entries_per_page, friends=ident.friends())
        self.hosted: dict[str, Profile] = {}
        self.hosting: set[str] = set()     # users whose mirror this device agreed to be
        self.cache: dict[str, FriendCache] = {}
        self.pending: list[PendingPost] = []
        self.denied: list[DeniedPost] = []
        self.log: list[SessionLogEntry] = []
        self.sink = sink
        self.retries = RetryTracker()
        self.received: Counter = Counter()  # (friend, id) -> successful transmissions
        self.on_bundle: Optional[Callable[[Profile, DeltaBundle], None]] = None
        self._last_stamp = 0
        device.app = self.handle
        device.authorize = self.authorize

    # --- helpers ---------------------------------------------------------
    @property
    def username(self) -> str:
        return self.device.username

    @property
    def now(self) -> int:
        return self.device.deployment.net.now

    def refresh_friends(self) -> None:
        self.profile.friends = set(self.device.identity.friends())
        for name in list(self.cache):
            if name not in self.profile.friends:
                del self.cache[name]

    def set_zone(self, name: str, members) -> None:
        self.profile.set_zone(name, members)

    def host(self, owner: str) -> None:
        """Agree to mirror ``owner``'s profile on this device."""
        self.hosting.add(owner)

    def _stamp(self) -> int:
        self._last_stamp = max(self.now, self._last_stamp + 1)
        return self._last_stamp

    def _record(self, start: int, elapsed: int, action: Action, target: str, serving: str, nbytes: int,
                status: Status, priority: int = -1) -> SessionLogEntry:
        retry = self.retries.observe((action, target), status.ok)
        entry = SessionLogEntry(start, start + elapsed, action, self.username, target, serving, nbytes, status,
                                priority, retry)
        self.log.append(entry)
        if self.sink is not None:
            self.sink(entry)
        return entry

    # --- own profile ----------------------------------------------------------
    def create_entry(self, kind: EntryKind, zone: str, body: bytes = b"", parent_id: Optional[int] = None) -> ProfileEntry:
        """Owner writes to their own profile on this device."""
        self.refresh_friends()
        entry = ProfileEntry(self.profile.next_id(self.now), kind, self.username, zone, body, parent_id)
        if kind in (EntryKind.COMMENT, EntryKind.LIKE, EntryKind.DISLIKE):
            if parent_id not in self.profile:
                raise PermissionDenied(f"no entry {parent_id} to react to")
        self.profile.append_entry(entry)
        return entry

    def delete_entry(self, entry_id: int) -> ProfileEntry:
        return self.profile.delete_entry(entry_id, self.username, self.now)

    # --- server side -------------------------------------------------------------
    def store_for(self, target: str) -> Optional[Profile]:
        if target == self.username:
            return self.profile
        return self.hosted.get(target)

    def authorize(self, requester: str, target: str) -> bool:
        if target == self.username:
            return requester == self.username or self.device.identity.is_friend(requester)
        if target in self.hosting:
            img = self.hosted.get(target)
            return requester == target or (img is not None and requester in img.friends)
        return False

    def handle(self, requester: str, target: str, payload: bytes) -> bytes:
        try:
            parts = decode_fields(payload)
            op = field_str(parts[0])
            tgt = field_str(parts[1])
            if tgt != target and not (op.startswith("sync-") and requester == tgt):
                raise Refused("request target differs from the channel target")
            if op.startswith("sync-"):
                return self._serve_sync(requester, tgt, op, parts[2:])
            store = self.store_for(tgt)
            if store is None or not self.authorize(requester, tgt):
                raise Refused(f"{self.username} does not serve {tgt} to {requester}")
            if tgt == self.username:
                self.refresh_friends()
            if op == "pull":
                bundle = store.compute_delta(requester, field_int(parts[2]), self.now)
                if self.on_bundle is not None:
                    self.on_bundle(store, bundle)
                return encode_fields([OK, bundle.to_bytes()])
            if op == "range":
                lo, hi = field_int(parts[2]), field_int(parts[3])
                entries = tuple(store.delta_entries(requester, lo, hi))
                bundle = DeltaBundle(requester, lo, entries, self.now, store.last_id, store.first_id, store.complete)
                if self.on_bundle is not None:
                    self.on_bundle(store, bundle)
                return encode_fields([OK, bundle.to_bytes()])
            if op == "post":
                stored = store.absorb(ProfileEntry.from_bytes(parts[2]), requester, self.now)
                return encode_fields([OK, stored.id])
            raise MalformedRequest(f"unknown op {op}")
        except (IndexError, ValueError) as exc:
            return _error(MalformedRequest(str(exc)))
        except MyZoneError as exc:
            return _error(exc)

    def _serve_sync(self, requester: str, target: str, op: str, args: list) -> bytes:
        if requester != target:
            raise Refused("only the profile owner may sync it")
        if target == self.username:
            store = self.profile
        elif target in self.hosting:
            store = self.hosted.get(target)
            if store is None:
                store = self.hosted[target] = Profile(target, self.settings.entries_per_page, complete=False)
        else:
            raise Refused(f"{self.username} does not mirror {target}")
        if op == "sync-probe":
            digest = args[0]
            if _image_digest(store, store.ids()) == digest:
                return encode_fields([OK, 1])
            return encode_fields([OK, 0, store.ids()])
        if op == "sync-fetch":
            want = [field_int(x) for x in decode_fields(args[0])]
            return encode_fields([OK, encode_entries(store.get(i) for i in want if i in store)])
        if op == "sync-push":
            meta, body, cap, complete = args[0], args[1], field_int(args[2]), bool(field_int(args[3]))
            store.load_meta(meta)
            store.merge(decode_entries(body))
            keep = store.newest_suffix(None if cap < 0 else cap)
            if len(keep) != len(store):
                store.replace_image(keep, complete)
            store.complete = complete
            return encode_fields([OK])
        raise MalformedRequest(f"unknown op {op}")

    # --- pulling -------------------------------------------------------------------
    def pull_updates(self, friend: str) -> int:
        """One update session with ``friend``; returns the number of entries applied."""
        start = self.now
        cache = self.cache.setdefault(friend, FriendCache())
        try:
            res = self.device.locate_and_connect(friend)
        except (AllUnreachable, InvalidTransition):
            self._record(start, 0, Action.UPDATE, friend, "", 0, Status.CONN_FAILED)
            raise SessionFailed(f"{friend}: nobody reachable") from None
        ch = res.channel
        staged: dict[int, ProfileEntry] = {}
        gaps = list(cache.gaps)
        try:
            bundle = DeltaBundle.from_bytes(_check(ch.request(encode_fields(["pull", friend, cache.watermark])))[0])
            if bundle.for_friend != self.username or any(e.id <= cache.watermark for e in bundle.entries):
                raise SessionFailed("bundle does not answer this request")
            for e in bundle.entries:
                staged[e.id] = e
            if not bundle.complete and bundle.first_available > cache.watermark + 1:
                gaps.append((cache.watermark, bundle.first_available))
            if bundle.complete and gaps:
                for lo, hi in gaps:
                    got = DeltaBundle.from_bytes(_check(ch.request(encode_fields(["range", friend, lo, hi])))[0])
                    for e in got.entries:
                        if lo < e.id < hi and e.id not in cache.entries:
                            staged[e.id] = e
                gaps = []
        except (SessionFailed, MalformedRequest, PermissionDenied) as exc:
            ch.close()
            self._record(start, ch.elapsed_ms, Action.UPDATE, friend, res.serving,
                         ch.bytes_sent + ch.bytes_received, Status.UPDATE_FAIL, res.priority)
            raise SessionFailed(str(exc)) from exc
        ch.close()
        # all or nothing: nothing above touched the cache
        for i, e in staged.items():
            cache.entries[i] = e
            self.received[(friend, i)] += 1
        cache.gaps = gaps
        cache.watermark = max(cache.watermark, bundle.watermark)
        self._record(start, ch.elapsed_ms, Action.UPDATE, friend, res.serving, ch.bytes_sent + ch.bytes_received,
                     Status.UPDATE_OK, res.priority)
        return len(staged)

    def evict(self, friend: str, first_id: int, last_id: int) -> int:
        """Drop a cached page; it is refetched by a later range pull."""
        cache = self.cache.get(friend)
        if cache is None:
            return 0
        drop = [i for i in cache.entries if first_id <= i <= last_id]
        for i in drop:
            del cache.entries[i]
        if drop:
            cache.gaps.append((first_id - 1, last_id + 1))
        return len(drop)

    # --- posting ---------------------------------------------------------------------
    def queue_post(self, target: str, kind: EntryKind, zone: str, body: bytes = b"",
                   parent_id: Optional[int] = None) -> PendingPost:
        entry = ProfileEntry(self._stamp(), kind, self.username, zone, body, parent_id)
        return self.enqueue(target, entry)

    def enqueue(self, target: str, entry: ProfileEntry) -> PendingPost:
        for p in self.pending:
            if p.target == target and p.entry.id == entry.id:
                return p
        p = PendingPost(target, entry)
        self.pending.append(p)
        return p

    def push_posts(self, target: Optional[str] = None) -> int:
        """Deliver queued posts (all targets, or one); returns how many went through."""
        targets = sorted({p.target for p in self.pending if target is None or p.target == target})
        delivered = 0
        for t in targets:
            delivered += self._push_to(t)
        return delivered

    def _push_to(self, target: str) -> int:
        queue = [p for p in self.pending if p.target == target]
        start = self.now
        try:
            res = self.device.locate_and_connect(target)
        except (AllUnreachable, InvalidTransition):
            for _ in queue:
                self._record(start, 0, Action.POSTING, target, "", 0, Status.CONN_FAILED)
            return 0
        ch = res.channel
        delivered = 0
        try:
            for p in queue:
                before = ch.bytes_sent + ch.bytes_received
                t0 = ch.elapsed_ms
                try:
                    _check(ch.request(encode_fields(["post", target, p.entry.to_bytes()])))
                except PermissionDenied as exc:
                    self.pending.remove(p)
                    self.denied.append(DeniedPost(target, p.entry, str(exc), self.now))
                    self._record(start + t0, ch.elapsed_ms - t0, Action.POSTING, target, res.serving,
                                 ch.bytes_sent + ch.bytes_received - before, Status.POST_FAIL, res.priority)
                    continue
                except (SessionFailed, MalformedRequest):
                    self._record(start + t0, ch.elapsed_ms - t0, Action.POSTING, target, res.serving,
                                 ch.bytes_sent + ch.bytes_received - before, Status.POST_FAIL, res.priority)
                    continue
                self.pending.remove(p)
                delivered += 1
                self._record(start + t0, ch.elapsed_ms - t0, Action.POSTING, target, res.serving,
                             ch.bytes_sent + ch.bytes_received - before, Status.POST_OK, res.priority)
        finally:
            ch.close()
        return delivered

    # --- messages ------------------------------------------------------------------------
    def send_message(self, recipient: str, body: bytes) -> ProfileEntry:
        """Seal ``body`` for ``recipient``: kept in the outbox, queued for their inbox."""
        entry = seal_private_message(self.device, recipient, body, self.profile.next_id(self.now))
        self.profile.append_entry(entry)
        self.enqueue(recipient, entry.with_id(self._stamp()))
        return entry

    def open_message(self, entry: ProfileEntry) -> bytes:
        return open_private_message(self.device, entry)

    # --- replica sync ----------------------------------------------------------------------
    def replicas(self) -> list[tuple[str, Optional[int], Optional[int]]]:
        """``(name, sibling priority, capacity)``: sibling devices by priority, then mirrors by rank."""
        ident = self.device.identity
        out = [(f"{self.username}#{p}", p, None) for p in range(MAX_SELF_PRIORITY + 1)
               if p != self.device.priority and p in ident.devices]
        for name, _rank, cap in ident.mirrors.ranked():
            out.append((name, None, cap))
        return out

    def sync_with_replicas(self) -> SyncReport:
        """Pull from every reachable replica, merge, then push the merged image back."""
        self.refresh_friends()
        report = SyncReport()
        channels = []
        for name, sibling, cap in self.replicas():
            start = self.now
            try:
                if sibling is not None:
                    ch = self.device.connect_sibling(sibling)
                else:
                    ch = self.device.locate_and_connect(name, max_priority=0).channel
            except (AllUnreachable, InvalidTransition):
                report.unreachable.append(name)
                self._record(start, 0, Action.SYNC, name, "", 0, Status.CONN_FAILED)
                continue
            try:
                probe = _check(ch.request(encode_fields(["sync-probe", self.username,
                                                         self._expected_digest(cap), -1 if cap is None else cap])))
                remote = None
                if field_int(probe[0]) == 0:
                    remote = [field_int(x) for x in decode_fields(probe[1])]
                    missing = [i for i in remote if i not in self.profile]
                    if missing:
                        got = _check(ch.request(encode_fields(["sync-fetch", self.username, missing])))
                        report.fetched += self.profile.merge(decode_entries(got[0]))
            except (SessionFailed, MalformedRequest, PermissionDenied):
                report.unreachable.append(name)
                self._record(start, ch.elapsed_ms, Action.SYNC, name, ch.serving, ch.bytes_sent + ch.bytes_received,
                             Status.UPDATE_FAIL, ch.serving_priority)
                ch.close()
                continue
            channels.append((name, cap, ch, remote, start))
        for name, cap, ch, remote, start in channels:
            try:
                if remote is not None:
                    suffix = self.profile.newest_suffix(cap)
                    have = set(remote)
                    send = [e for e in suffix if e.id not in have or e.is_tombstone]
                    _check(ch.request(encode_fields(["sync-push", self.username, self.profile.meta_bytes(),
                                                     encode_entries(send), -1 if cap is None else cap,
                                                     int(cap is None or len(suffix) == len(self.profile))])))
                    report.pushed += len(send)
                report.reached.append(name)
                status = Status.UPDATE_OK
            except (SessionFailed, MalformedRequest, PermissionDenied):
                report.unreachable.append(name)
                status = Status.UPDATE_FAIL
            finally:
                ch.close()
            report.bytes += ch.bytes_sent + ch.bytes_received
            self._record(start, ch.elapsed_ms, Action.SYNC, name, ch.serving, ch.bytes_sent + ch.bytes_received,
                         status, ch.serving_priority)
        return report

    def _expected_digest(self, cap: Optional[int]) -> bytes:
        return _image_digest(self.profile, [e.id for e in self.profile.newest_suffix(cap)])


def _image_digest(store: Profile, ids: list) -> bytes:
    tomb = [store.get(i).is_tombstone for i in ids]
    return ids_digest(ids) + crypto.field_digest([store.meta_bytes(), tomb])[:8]


def seal_private_message(device: PeerDevice, recipient: str, body: bytes, entry_id: int) -> ProfileEntry:
    """Message entry readable only by ``recipient`` and authenticated as the sender's."""
    ident = device.identity
    if not ident.is_friend(recipient):
        raise NotFriend(f"{recipient} is not a friend of {ident.username}")
    cert = device._cert_for(recipient)
    if cert is None:
        raise NotFriend(f"no certificate for {recipient}")
    sealed = crypto.seal(ident.keys.private_key, cert.public_key, body, device.scheme)
    return ProfileEntry(entry_id, EntryKind.MESSAGE, ident.username, message_zone(recipient), sealed)


def open_private_message(device: PeerDevice, entry: ProfileEntry) -> bytes:
    cert = device._cert_for(entry.author)
    if cert is None:
        raise NotFriend(f"no certificate for {entry.author}")
    return crypto.open_sealed(device.identity.keys.private_key, cert.public_key, entry.body, device.scheme)

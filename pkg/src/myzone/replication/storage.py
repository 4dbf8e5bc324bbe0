"""On-disk layout of a device's replication state and the cache cleaner.

Everything lives under one directory per username::

    <user>/settings.txt              key=value lines
    <user>/zones.txt                 zone<TAB>member,member,...
    <user>/mirrors.txt               mirror<TAB>rank<TAB>capacity
    <user>/originals.txt             users this device mirrors
    <user>/pendingChanges.txt        target<TAB>entry line
    <user>/profile/history.txt       first_id<TAB>last_id<TAB>count per page
    <user>/profile/page-NNNNN.txt    entry lines
    <user>/mirrors/<owner>/...       mirrored images (history + pages)
    <user>/friends/<friend>/watermark.txt
    <user>/friends/<friend>/page-NNNNN.txt

An entry line is ``id kind author zone parent base64(body)`` separated by
tabs, ``-`` for no parent. The text layout is the documented format of this
package and is not byte-compatible with any other implementation.

The cleaner compares the *correct* image (what the engine state says should
exist) with the *existing* image (what is on disk): files only on disk are
deleted, then whole friend-cache pages are evicted oldest first until the
cache fits its limit. The owner's profile and mirrored images are never
evicted.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..errors import IoFailure
from .store import ProfileEntry

FRIENDS = "friends"


def _page_files(prefix: str, entries: list[ProfileEntry], per_page: int) -> dict[str, bytes]:
    files = {}
    rows = []
    for n in range(0, len(entries), per_page):
        page = entries[n:n + per_page]
        files[f"{prefix}/page-{n // per_page:05d}.txt"] = "".join(e.to_line() + "\n" for e in page).encode()
        rows.append(f"{page[0].id}\t{page[-1].id}\t{len(page)}\n")
    files[f"{prefix}/history.txt"] = "".join(rows).encode()
    return files


def layout(engine) -> dict[str, bytes]:
    """Canonical file map for one device's engine state."""
    user = engine.username
    s = engine.settings
    per_page = s.entries_per_page
    files: dict[str, bytes] = {}
    files[f"{user}/settings.txt"] = (
        f"entries_per_page={per_page}\nsync_period_ms={s.sync_period_ms}\n"
        f"refresh_interval_ms={s.refresh_interval_ms}\ncache_limit_bytes={s.cache_limit_bytes}\n"
        f"priority={engine.device.priority}\n").encode()
    prof = engine.profile
    files[f"{user}/zones.txt"] = "".join(
        f"{z}\t{','.join(sorted(prof.members(z) or ()))}\n" for z in prof.zone_names()).encode()
    files[f"{user}/mirrors.txt"] = "".join(
        f"{n}\t{r}\t{c}\n" for n, r, c in engine.device.identity.mirrors.ranked()).encode()
    files[f"{user}/originals.txt"] = "".join(f"{o}\n" for o in sorted(engine.hosting)).encode()
    files[f"{user}/pendingChanges.txt"] = "".join(
        f"{p.target}\t{p.entry.to_line()}\n" for p in engine.pending).encode()
    files.update(_page_files(f"{user}/profile", prof.entries(), per_page))
    for owner in sorted(engine.hosted):
        files.update(_page_files(f"{user}/mirrors/{owner}", engine.hosted[owner].entries(), per_page))
    for friend in sorted(engine.cache):
        cache = engine.cache[friend]
        base = f"{user}/{FRIENDS}/{friend}"
        files[f"{base}/watermark.txt"] = f"{cache.watermark}\n".encode()
        pages = _page_files(base, [cache.entries[i] for i in sorted(cache.entries)], per_page)
        pages.pop(f"{base}/history.txt")
        files.update(pages)
    return files


def parse_page(data: bytes) -> list[ProfileEntry]:
    return [ProfileEntry.from_line(line) for line in data.decode().splitlines() if line]


def _page_range(data: bytes) -> tuple[int, int]:
    lines = [ln for ln in data.decode().splitlines() if ln]
    return int(lines[0].split("\t", 1)[0]), int(lines[-1].split("\t", 1)[0])


@dataclass
class EvictedPage:
    path: str
    friend: str
    first_id: int
    last_id: int
    size: int


@dataclass
class CleanReport:
    orphans: list = field(default_factory=list)
    evicted: list = field(default_factory=list)
    cache_bytes: int = 0


@dataclass
class StorageImages:
    correct: dict            # path -> size
    existing: dict           # path -> size
    cache_limit_bytes: int
    page_ranges: dict = field(default_factory=dict)  # friend-cache page path -> (first_id, last_id)

    @classmethod
    def from_files(cls, correct_files: dict[str, bytes], existing: dict[str, int], cache_limit_bytes: int
                   ) -> "StorageImages":
        ranges = {p: _page_range(b) for p, b in correct_files.items() if _is_cache_page(p) and b}
        return cls({p: len(b) for p, b in correct_files.items()}, dict(existing), cache_limit_bytes, ranges)

    def cache_bytes(self) -> int:
        return sum(size for p, size in self.existing.items() if _is_cache_page(p))

    def clean(self) -> CleanReport:
        report = CleanReport()
        for path in sorted(set(self.existing) - set(self.correct)):
            del self.existing[path]
            report.orphans.append(path)
        pages = sorted((rng[1], p) for p, rng in self.page_ranges.items() if p in self.existing)
        while self.cache_bytes() > self.cache_limit_bytes and pages:
            _, path = pages.pop(0)
            size = self.existing.pop(path)
            self.correct.pop(path, None)
            first, last = self.page_ranges.pop(path)
            report.evicted.append(EvictedPage(path, path.split("/")[2], first, last, size))
        report.cache_bytes = self.cache_bytes()
        return report


def _is_cache_page(path: str) -> bool:
    parts = path.split("/")
    return len(parts) == 4 and parts[1] == FRIENDS and parts[3].startswith("page-")


def clean_engine(engine, existing: Optional[dict[str, int]] = None) -> CleanReport:
    """Run the cleaner against an engine and apply evictions to its caches."""
    files = layout(engine)
    if existing is None:
        existing = {p: len(b) for p, b in files.items()}
    images = StorageImages.from_files(files, existing, engine.settings.cache_limit_bytes)
    report = images.clean()
    for page in report.evicted:
        engine.evict(page.friend, page.first_id, page.last_id)
    return report


def write_tree(root: str | os.PathLike, files: dict[str, bytes]) -> None:
    base = Path(root)
    try:
        for rel in sorted(files):
            path = base / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(files[rel])
    except OSError as exc:
        raise IoFailure(f"cannot write {root}: {exc}") from exc


def read_tree(root: str | os.PathLike) -> dict[str, bytes]:
    base = Path(root)
    try:
        return {p.relative_to(base).as_posix(): p.read_bytes() for p in sorted(base.rglob("*")) if p.is_file()}
    except OSError as exc:
        raise IoFailure(f"cannot read {root}: {exc}") from exc

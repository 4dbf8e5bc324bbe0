"""One line per pull, post or sync attempt; the metrics read these."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from enum import Enum


class Action(Enum):
    POSTING = "Posting"
    UPDATE = "Update"
    SYNC = "Sync"


class Status(Enum):
    CONN_ESTABLISHED = "ConnEstablished"
    CONN_FAILED = "ConnFailed"
    UPDATE_OK = "UpdateOk"
    UPDATE_FAIL = "UpdateFail"
    POST_OK = "PostOk"
    POST_FAIL = "PostFail"

    @property
    def ok(self) -> bool:
        return self in (Status.UPDATE_OK, Status.POST_OK, Status.CONN_ESTABLISHED)


@dataclass(frozen=True)
class SessionLogEntry:
    start_ms: int
    end_ms: int
    action: Action
    client: str
    target: str
    serving: str            # "" when nobody could be reached
    bytes: int
    status: Status
    serving_priority: int = -1
    retry: bool = False     # an earlier attempt for (client, action, target) failed

    def __post_init__(self):
        if self.end_ms < self.start_ms:
            raise ValueError("session ends before it starts")

    @property
    def ok(self) -> bool:
        return self.status.ok

    def to_dict(self) -> dict:
        d = asdict(self)
        d["action"] = self.action.value
        d["status"] = self.status.value
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "SessionLogEntry":
        d = dict(d)
        d["action"] = Action(d["action"])
        d["status"] = Status(d["status"])
        return cls(**d)


class RetryTracker:
    """Marks an attempt as a retry when the previous one for its key failed."""

    def __init__(self):
        self._failed: set = set()

    def observe(self, key: tuple, ok: bool) -> bool:
        retry = key in self._failed
        if ok:
            self._failed.discard(key)
        else:
            self._failed.add(key)
        return retry

"""Profile storage, zones, delta pulls, posting and replica sync."""

from .engine import (FriendCache, PendingPost, ReplicaEngine, ReplicationSettings, SyncReport,  # noqa: F401
                     open_private_message, seal_private_message)
from .storage import CleanReport, StorageImages, clean_engine, layout, read_tree, write_tree  # noqa: F401
from .store import (ALL, DeltaBundle, EntryKind, HistoryRow, Profile, ProfileEntry, message_zone)  # noqa: F401

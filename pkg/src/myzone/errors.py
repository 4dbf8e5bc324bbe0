"""Exception classes shared by the protocol modules.

Every protocol failure in the package derives from :class:`MyZoneError`, so
drivers can catch one base class and report ``type(exc).__name__`` as the
diagnostic class.
"""

from __future__ import annotations


class MyZoneError(Exception):
    """Base class for all protocol and harness errors."""


# crypto
class CryptoError(MyZoneError):
    pass


class AuthenticityFailure(CryptoError):
    """Signature did not verify under the claimed sender key."""


class ConfidentialityFailure(CryptoError):
    """Blob could not be decrypted with the given recipient key."""


# network
class NetworkError(MyZoneError):
    pass


class Unreachable(NetworkError):
    pass


class StunUnreachable(NetworkError):
    pass


# certificate authority
class DuplicateUsername(MyZoneError):
    pass


class MalformedRequest(MyZoneError):
    pass


class BadCertificate(MyZoneError):
    pass


# rendezvous
class DigestMismatch(MyZoneError):
    pass


class NoSession(MyZoneError):
    pass


class NotFound(MyZoneError):
    pass


class UnknownTarget(MyZoneError):
    pass


class UnknownRelay(MyZoneError):
    pass


class NoRelayAvailable(MyZoneError):
    pass


class BackupUnreachable(MyZoneError):
    pass


class NoBackupAlive(MyZoneError):
    pass


# relay
class CapacityExhausted(MyZoneError):
    pass


class AuthFailure(MyZoneError):
    pass


class ReplayDetected(MyZoneError):
    pass


class UnknownSlot(MyZoneError):
    pass


class PairBroken(MyZoneError):
    pass


# peer engine
class AllUnreachable(MyZoneError):
    pass


class Refused(MyZoneError):
    pass


class InvalidTransition(MyZoneError):
    pass


class NotFriend(MyZoneError):
    pass


# guarded registration and complaints
class InvalidParams(MyZoneError):
    pass


class NoFriendOnline(MyZoneError):
    pass


class RegistrationTimeout(MyZoneError):
    pass


class NotRegisteredWithServer(MyZoneError):
    pass


class DuplicateComplaint(MyZoneError):
    pass


class BadSignature(MyZoneError):
    pass


class StaleTimestamp(MyZoneError):
    pass


# replication
class PermissionDenied(MyZoneError):
    pass


class UnknownId(MyZoneError):
    pass


class SessionFailed(MyZoneError):
    pass


# harness
class ScenarioInvalid(MyZoneError):
    """Scenario failed validation; ``problems`` lists ``(field, message)``."""

    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = list(problems)
        text = "; ".join(f"{f}: {m}" for f, m in self.problems)
        super().__init__(text or "invalid scenario")


class IoFailure(MyZoneError):
    pass

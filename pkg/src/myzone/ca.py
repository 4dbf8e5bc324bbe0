"""Certificate authority.

Request (sealed by the requester to the CA public key)::

    encode_fields([username, public_key])

Reply (sealed by the CA to the requester's public key)::

    Certificate.to_bytes()  ==  encode_fields([username, public_key, issuer, signature])

The certificate signature covers ``encode_fields([username, public_key])``.
The CA is assumed always correct and reachable; usernames are unique by exact
(case-sensitive) match and certificates never expire.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from . import crypto
from .crypto import Certificate, KeyPair, Scheme
from .errors import AuthenticityFailure, ConfidentialityFailure, DuplicateUsername, MalformedRequest
from .wire import decode_fields, encode_fields, field_str

log = logging.getLogger(__name__)


@dataclass
class CaState:
    ca_keys: KeyPair
    issued: dict[str, Certificate] = field(default_factory=dict)


class CertificateAuthority:
    def __init__(self, name: str, keys: KeyPair, scheme: Scheme | None = None):
        self.name = name
        self.scheme = scheme or crypto.get_scheme()
        self.state = CaState(keys)

    @classmethod
    def from_seed(cls, name: str, seed: int, scheme: Scheme | None = None) -> "CertificateAuthority":
        s = scheme or crypto.get_scheme()
        return cls(name, s.keypair(seed), s)

    @property
    def public_key(self) -> bytes:
        return self.state.ca_keys.public_key

    def has_certificate(self, username: str) -> bool:
        return username in self.state.issued

    def certificate_for(self, username: str) -> Certificate | None:
        return self.state.issued.get(username)

    def issue_certificate(self, request: bytes) -> bytes:
        keys = self.state.ca_keys
        try:
            ct, sig = crypto.split_sealed(request)
            body = self.scheme.decrypt_with(keys.private_key, ct)
            username_raw, public_key = decode_fields(body)
            username = field_str(username_raw)
        except (AuthenticityFailure, ConfidentialityFailure, MalformedRequest, ValueError) as exc:
            raise MalformedRequest("certificate request does not open") from exc
        if not username:
            raise MalformedRequest("empty username")
        if not self.scheme.verify(public_key, b"myzone/seal/v1" + ct, sig):
            raise MalformedRequest("request not signed by the enclosed key")
        if username in self.state.issued:
            raise DuplicateUsername(username)
        cert = Certificate(username, public_key, self.name,
                           self.scheme.sign(keys.private_key, encode_fields([username, public_key])))
        self.state.issued[username] = cert
        log.debug("issued certificate for %s", username)
        return crypto.seal(keys.private_key, public_key, cert.to_bytes(), self.scheme)


def certificate_request(keys: KeyPair, username: str, ca_public: bytes, scheme: Scheme | None = None) -> bytes:
    return crypto.seal(keys.private_key, ca_public, encode_fields([username, keys.public_key]), scheme)


def open_certificate_reply(keys: KeyPair, reply: bytes, ca_public: bytes, scheme: Scheme | None = None) -> Certificate:
    cert = Certificate.from_bytes(crypto.open_sealed(keys.private_key, ca_public, reply, scheme))
    if not crypto.verify_certificate(cert, ca_public, scheme):
        raise AuthenticityFailure("certificate not signed by this CA")
    return cert


def obtain_certificate(ca: CertificateAuthority, keys: KeyPair, username: str) -> Certificate:
    """Client side of the sign-up exchange."""
    reply = ca.issue_certificate(certificate_request(keys, username, ca.public_key, ca.scheme))
    return open_certificate_reply(keys, reply, ca.public_key, ca.scheme)

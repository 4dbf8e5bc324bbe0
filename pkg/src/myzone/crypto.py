"""Pluggable public-key and session primitives.

Two bindings implement :class:`Scheme`:

* :class:`StandardScheme` -- Ed25519 signatures, X25519 + HKDF +
  ChaCha20-Poly1305 for sealing and session frames.
* :class:`ToyScheme` -- hash-only and deterministic. Its public key is a hash
  of the private key and its "signatures" are MACs keyed by the public key,
  so it offers no security at all. It exists for fast exhaustive tests and
  large simulations; every protocol contract holds under it.

All operations are pure functions of their inputs. Sealing derives its
ephemeral material from the sender key, recipient key and payload, so equal
inputs give byte-identical blobs.

Sealed blobs are encrypt-then-sign: the payload is encrypted to the
recipient and the ciphertext is signed by the sender. Opening checks the
signature first (:class:`AuthenticityFailure`) and then decrypts
(:class:`ConfidentialityFailure`).
"""

from __future__ import annotations

import hashlib
import hmac
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Sequence

from .errors import AuthenticityFailure, ConfidentialityFailure, MalformedRequest
from .wire import decode_fields, encode_fields, field_int, field_str

ID_BITS = 160
ID_SPACE = 1 << ID_BITS

_SEAL_CONTEXT = b"myzone/seal/v1"
_SESSION_KEY_CONTEXT = b"myzone/session-key/v1"


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    private_key: bytes
    algorithm_id: str


@dataclass(frozen=True)
class Certificate:
    username: str
    public_key: bytes
    issuer: str
    signature: bytes

    def signed_bytes(self) -> bytes:
        return encode_fields([self.username, self.public_key])

    def to_bytes(self) -> bytes:
        return encode_fields([self.username, self.public_key, self.issuer, self.signature])

    @classmethod
    def from_bytes(cls, data: bytes) -> "Certificate":
        parts = decode_fields(data)
        if len(parts) != 4:
            raise MalformedRequest("certificate needs 4 fields")
        return cls(field_str(parts[0]), parts[1], field_str(parts[2]), parts[3])


@dataclass(frozen=True)
class SessionKey:
    key: bytes
    established_at: int


class Scheme(ABC):
    algorithm_id: str

    @abstractmethod
    def keypair(self, seed: int) -> KeyPair: ...

    @abstractmethod
    def public_from_private(self, private_key: bytes) -> bytes: ...

    @abstractmethod
    def sign(self, private_key: bytes, message: bytes) -> bytes: ...

    @abstractmethod
    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool: ...

    @abstractmethod
    def encrypt_to(self, recipient_public: bytes, plaintext: bytes, entropy: bytes) -> bytes: ...

    @abstractmethod
    def decrypt_with(self, private_key: bytes, blob: bytes) -> bytes: ...

    @abstractmethod
    def session_encrypt(self, key: bytes, plaintext: bytes, nonce: bytes) -> bytes: ...

    @abstractmethod
    def session_decrypt(self, key: bytes, blob: bytes) -> bytes: ...


def _seed_bytes(seed: int, label: bytes) -> bytes:
    return hashlib.sha256(label + (seed & ((1 << 64) - 1)).to_bytes(8, "big")).digest()


def _xor(data: bytes, stream: bytes) -> bytes:
    if not data:
        return b""
    n = len(data)
    return (int.from_bytes(data, "big") ^ int.from_bytes(stream, "big")).to_bytes(n, "big")


class ToyScheme(Scheme):
    algorithm_id = "toy-hash-v1"

    def keypair(self, seed: int) -> KeyPair:
        private = _seed_bytes(seed, b"toy/private")
        return KeyPair(self.public_from_private(private), private, self.algorithm_id)

    def public_from_private(self, private_key: bytes) -> bytes:
        return hashlib.sha256(b"toy/public" + private_key).digest()

    def sign(self, private_key: bytes, message: bytes) -> bytes:
        return hmac.new(self.public_from_private(private_key), message, hashlib.sha256).digest()

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool:
        expected = hmac.new(public_key, message, hashlib.sha256).digest()
        return hmac.compare_digest(expected, signature)

    def _stream(self, key: bytes, nonce: bytes, n: int) -> bytes:
        return hashlib.shake_256(b"toy/stream" + key + nonce).digest(n)

    def _tag(self, key: bytes, nonce: bytes, ct: bytes) -> bytes:
        return hmac.new(key, nonce + ct, hashlib.sha256).digest()[:16]

    def encrypt_to(self, recipient_public: bytes, plaintext: bytes, entropy: bytes) -> bytes:
        nonce = hashlib.sha256(b"toy/nonce" + entropy).digest()[:16]
        ct = _xor(plaintext, self._stream(recipient_public, nonce, len(plaintext)))
        return nonce + ct + self._tag(recipient_public, nonce, ct)

    def decrypt_with(self, private_key: bytes, blob: bytes) -> bytes:
        return self._open(self.public_from_private(private_key), blob)

    def _open(self, key: bytes, blob: bytes) -> bytes:
        if len(blob) < 32:
            raise ConfidentialityFailure("blob too short")
        nonce, ct, tag = blob[:16], blob[16:-16], blob[-16:]
        if not hmac.compare_digest(self._tag(key, nonce, ct), tag):
            raise ConfidentialityFailure("tag mismatch")
        return _xor(ct, self._stream(key, nonce, len(ct)))

    def session_encrypt(self, key: bytes, plaintext: bytes, nonce: bytes) -> bytes:
        nonce = nonce[:16].ljust(16, b"\0")
        ct = _xor(plaintext, self._stream(key, nonce, len(plaintext)))
        return nonce + ct + self._tag(key, nonce, ct)

    def session_decrypt(self, key: bytes, blob: bytes) -> bytes:
        return self._open(key, blob)


class StandardScheme(Scheme):
    algorithm_id = "ed25519+x25519-chacha20poly1305"

    def __init__(self):
        from cryptography.hazmat.primitives.asymmetric import ed25519, x25519
        from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

        self._ed = ed25519
        self._x = x25519
        self._aead = ChaCha20Poly1305

    def _raw_public(self, key) -> bytes:
        from cryptography.hazmat.primitives import serialization

        return key.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)

    def keypair(self, seed: int) -> KeyPair:
        private = _seed_bytes(seed, b"std/ed25519") + _seed_bytes(seed, b"std/x25519")
        return KeyPair(self.public_from_private(private), private, self.algorithm_id)

    def public_from_private(self, private_key: bytes) -> bytes:
        if len(private_key) != 64:
            raise ConfidentialityFailure("private key must be 64 bytes")
        ed = self._ed.Ed25519PrivateKey.from_private_bytes(private_key[:32])
        x = self._x.X25519PrivateKey.from_private_bytes(private_key[32:])
        return self._raw_public(ed.public_key()) + self._raw_public(x.public_key())

    def sign(self, private_key: bytes, message: bytes) -> bytes:
        return self._ed.Ed25519PrivateKey.from_private_bytes(private_key[:32]).sign(message)

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool:
        from cryptography.exceptions import InvalidSignature

        if len(public_key) != 64 or len(signature) != 64:
            return False
        try:
            self._ed.Ed25519PublicKey.from_public_bytes(public_key[:32]).verify(signature, message)
        except InvalidSignature:
            return False
        return True

    def _kdf(self, shared: bytes, eph_public: bytes, recipient_x: bytes) -> bytes:
        from cryptography.hazmat.primitives import hashes
        from cryptography.hazmat.primitives.kdf.hkdf import HKDF

        return HKDF(hashes.SHA256(), 32, salt=None, info=b"myzone/ecies" + eph_public + recipient_x).derive(shared)

    def encrypt_to(self, recipient_public: bytes, plaintext: bytes, entropy: bytes) -> bytes:
        if len(recipient_public) != 64:
            raise ConfidentialityFailure("public key must be 64 bytes")
        eph = self._x.X25519PrivateKey.from_private_bytes(hashlib.sha256(b"std/eph" + entropy).digest())
        eph_public = self._raw_public(eph.public_key())
        recipient_x = recipient_public[32:]
        shared = eph.exchange(self._x.X25519PublicKey.from_public_bytes(recipient_x))
        key = self._kdf(shared, eph_public, recipient_x)
        return eph_public + self._aead(key).encrypt(b"\0" * 12, plaintext, None)

    def decrypt_with(self, private_key: bytes, blob: bytes) -> bytes:
        from cryptography.exceptions import InvalidTag

        if len(blob) < 32 + 16 or len(private_key) != 64:
            raise ConfidentialityFailure("blob too short")
        x = self._x.X25519PrivateKey.from_private_bytes(private_key[32:])
        eph_public = blob[:32]
        recipient_x = self._raw_public(x.public_key())
        try:
            shared = x.exchange(self._x.X25519PublicKey.from_public_bytes(eph_public))
            return self._aead(self._kdf(shared, eph_public, recipient_x)).decrypt(b"\0" * 12, blob[32:], None)
        except (InvalidTag, ValueError) as exc:
            raise ConfidentialityFailure("cannot decrypt") from exc

    def session_encrypt(self, key: bytes, plaintext: bytes, nonce: bytes) -> bytes:
        nonce = nonce[:12].ljust(12, b"\0")
        return nonce + self._aead(key).encrypt(nonce, plaintext, None)

    def session_decrypt(self, key: bytes, blob: bytes) -> bytes:
        from cryptography.exceptions import InvalidTag

        if len(blob) < 12 + 16:
            raise ConfidentialityFailure("blob too short")
        try:
            return self._aead(key).decrypt(blob[:12], blob[12:], None)
        except InvalidTag as exc:
            raise ConfidentialityFailure("session tag mismatch") from exc


TOY = ToyScheme()
_SCHEMES: dict[str, Scheme] = {"toy": TOY}


def get_scheme(name: str = "standard") -> Scheme:
    if name not in _SCHEMES:
        if name != "standard":
            raise KeyError(f"unknown crypto scheme {name!r}")
        _SCHEMES["standard"] = StandardScheme()
    return _SCHEMES[name]


def _resolve(scheme: Scheme | None) -> Scheme:
    return scheme if scheme is not None else get_scheme("standard")


def generate_keypair(seed: int, scheme: Scheme | None = None) -> KeyPair:
    return _resolve(scheme).keypair(seed)


def field_digest(fields: Sequence) -> bytes:
    return hashlib.sha256(encode_fields(fields)).digest()


def sign_digest(private_key: bytes, fields: Sequence, scheme: Scheme | None = None) -> bytes:
    if not fields:
        raise ValueError("field list must be non-empty")
    return _resolve(scheme).sign(private_key, field_digest(fields))


def verify_digest(public_key: bytes, fields: Sequence, signature: bytes, scheme: Scheme | None = None) -> bool:
    if not fields:
        return False
    return _resolve(scheme).verify(public_key, field_digest(fields), signature)


def seal(sender_private: bytes, recipient_public: bytes, payload: bytes, scheme: Scheme | None = None) -> bytes:
    s = _resolve(scheme)
    entropy = hashlib.sha256(_SEAL_CONTEXT + sender_private + recipient_public + payload).digest()
    ct = s.encrypt_to(recipient_public, payload, entropy)
    return encode_fields([ct, s.sign(sender_private, _SEAL_CONTEXT + ct)])


def split_sealed(blob: bytes) -> tuple[bytes, bytes]:
    try:
        parts = decode_fields(blob)
    except MalformedRequest as exc:
        raise AuthenticityFailure("malformed sealed blob") from exc
    if len(parts) != 2:
        raise AuthenticityFailure("sealed blob needs ciphertext and signature")
    return parts[0], parts[1]


def open_sealed(recipient_private: bytes, sender_public: bytes, blob: bytes, scheme: Scheme | None = None) -> bytes:
    s = _resolve(scheme)
    ct, sig = split_sealed(blob)
    if not s.verify(sender_public, _SEAL_CONTEXT + ct, sig):
        raise AuthenticityFailure("sender signature does not verify")
    return s.decrypt_with(recipient_private, ct)


def seal_session_key(sender_private: bytes, recipient_public: bytes, key: SessionKey,
                     scheme: Scheme | None = None) -> bytes:
    body = encode_fields([_SESSION_KEY_CONTEXT, key.key, key.established_at])
    return seal(sender_private, recipient_public, body, scheme)


def open_session_key(recipient_private: bytes, sender_public: bytes, blob: bytes,
                     scheme: Scheme | None = None) -> SessionKey:
    body = open_sealed(recipient_private, sender_public, blob, scheme)
    try:
        context, key, established = decode_fields(body)
    except (ValueError, MalformedRequest) as exc:
        raise AuthenticityFailure("session key body malformed") from exc
    if context != _SESSION_KEY_CONTEXT:
        raise AuthenticityFailure("not a session key")
    return SessionKey(key, field_int(established))


def derive_session_key(material: bytes, established_at: int) -> SessionKey:
    """Fresh 32-byte key from caller-supplied randomness."""
    return SessionKey(hashlib.sha256(b"myzone/session" + material).digest(), established_at)


def verify_certificate(cert: Certificate, ca_public: bytes, scheme: Scheme | None = None) -> bool:
    return _resolve(scheme).verify(ca_public, cert.signed_bytes(), cert.signature)


def dual_hash(username: str) -> tuple[int, int]:
    """Two independent 160-bit ring identifiers for ``username``.

    ``id_a`` is MD5 widened to 160 bits by appending the first four bytes of
    MD5(MD5(username)); ``id_b`` is SHA-1.
    """
    if not username:
        raise ValueError("username must be non-empty")
    raw = username.encode("utf-8")
    md5 = hashlib.md5(raw).digest()
    id_a = int.from_bytes(md5 + hashlib.md5(md5).digest()[:4], "big")
    id_b = int.from_bytes(hashlib.sha1(raw).digest(), "big")
    return id_a, id_b


def ring_id(address: str) -> int:
    """Ring position of a server from its address."""
    return int.from_bytes(hashlib.sha1(address.encode("utf-8")).digest(), "big")

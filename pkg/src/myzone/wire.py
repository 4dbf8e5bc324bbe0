"""Canonical byte encodings.

Fields are length-prefixed: a 4-byte big-endian length followed by the raw
bytes. Field values are converted with :func:`as_field`:

    bytes / bytearray   as is
    str                 UTF-8
    int                 8-byte big-endian two's complement
    None                empty
    list / tuple        nested :func:`encode_fields` of the items
    enum                its ``value`` converted by the rules above

Tagged records (relay control messages, CA request/reply) are one tag byte
followed by ``encode_fields(fields)``. Frames on a relayed stream are a
4-byte big-endian body length followed by the opaque body.
"""

from __future__ import annotations

import enum
import struct
from typing import Iterable, Sequence

from .errors import MalformedRequest

_LEN = struct.Struct(">I")
_INT = struct.Struct(">q")


def as_field(value) -> bytes:
    if isinstance(value, (bytes, bytearray)):
        return bytes(value)
    if isinstance(value, enum.Enum):
        return as_field(value.value)
    if isinstance(value, bool):
        return _INT.pack(int(value))
    if isinstance(value, int):
        return _INT.pack(value)
    if isinstance(value, str):
        return value.encode("utf-8")
    if value is None:
        return b""
    if isinstance(value, (list, tuple)):
        return encode_fields(value)
    raise TypeError(f"cannot encode {type(value).__name__} as a field")


def encode_fields(fields: Iterable) -> bytes:
    out = bytearray()
    for value in fields:
        raw = as_field(value)
        out += _LEN.pack(len(raw))
        out += raw
    return bytes(out)


def decode_fields(data: bytes) -> list[bytes]:
    fields = []
    pos = 0
    end = len(data)
    while pos < end:
        if pos + 4 > end:
            raise MalformedRequest("truncated length prefix")
        (size,) = _LEN.unpack_from(data, pos)
        pos += 4
        if pos + size > end:
            raise MalformedRequest("field overruns buffer")
        fields.append(data[pos:pos + size])
        pos += size
    return fields


def field_int(raw: bytes) -> int:
    if len(raw) != 8:
        raise MalformedRequest("integer field must be 8 bytes")
    return _INT.unpack(raw)[0]


def field_str(raw: bytes) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedRequest("bad utf-8 field") from exc


def encode_record(tag: int, fields: Sequence) -> bytes:
    return bytes([tag]) + encode_fields(fields)


def decode_record(data: bytes) -> tuple[int, list[bytes]]:
    if not data:
        raise MalformedRequest("empty record")
    return data[0], decode_fields(data[1:])


def frame(body: bytes) -> bytes:
    return _LEN.pack(len(body)) + body


def unframe(data: bytes) -> tuple[bytes, bytes]:
    """Split one frame off ``data``; returns ``(body, rest)``."""
    if len(data) < 4:
        raise MalformedRequest("short frame header")
    (size,) = _LEN.unpack_from(data, 0)
    if len(data) < 4 + size:
        raise MalformedRequest("short frame body")
    return data[4:4 + size], data[4 + size:]

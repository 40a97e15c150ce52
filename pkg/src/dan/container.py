"""Binary record container used for dataset splits and embedding exports.

Layout (all integers little-endian)::

    b"DANSYN01"  u32 record_count
    repeat record_count times:
        u32 payload_length  payload  u32 crc32(payload)

A payload is ``u32 meta_length``, UTF-8 JSON metadata, then the raw
little-endian float64 bytes of one array whose shape is ``meta["_shape"]``.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Iterable

import numpy as np

MAGIC = b"DANSYN01"
MAGIC_FAMILY = b"DANSYN"

_U32 = struct.Struct("<I")


class ContainerError(Exception):
    """Base class for unreadable container files."""


class VersionError(ContainerError):
    pass


class MalformedRecordError(ContainerError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message if index is None else f"record {index}: {message}")
        self.index = index


class ChecksumError(ContainerError):
    def __init__(self, index: int):
        super().__init__(f"record {index}: checksum mismatch")
        self.index = index


def encode_payload(meta: dict, array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array, dtype="<f8")
    meta = dict(meta, _shape=list(array.shape))
    head = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _U32.pack(len(head)) + head + array.tobytes()


def decode_payload(payload: bytes, index: int | None = None) -> tuple[dict, np.ndarray]:
    try:
        (n,) = _U32.unpack_from(payload, 0)
        meta = json.loads(payload[4 : 4 + n].decode("utf-8"))
        shape = tuple(meta.pop("_shape"))
        body = payload[4 + n :]
        array = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(shape)
    except (struct.error, UnicodeDecodeError, ValueError, KeyError, TypeError) as e:
        raise MalformedRecordError(f"undecodable payload ({e})", index) from None
    return meta, array


def write_records(path, records: Iterable[tuple[dict, np.ndarray]]) -> None:
    records = list(records)
    out = bytearray(MAGIC)
    out += _U32.pack(len(records))
    for meta, array in records:
        payload = encode_payload(meta, array)
        out += _U32.pack(len(payload))
        out += payload
        out += _U32.pack(zlib.crc32(payload))
    Path(path).write_bytes(bytes(out))


def read_records(path) -> list[tuple[dict, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) or not data.startswith(MAGIC_FAMILY):
        raise MalformedRecordError("not a record container (bad magic)")
    if data[: len(MAGIC)] != MAGIC:
        raise VersionError(f"unsupported container version {data[:8]!r}, expected {MAGIC!r}")
    pos = len(MAGIC)
    if len(data) < pos + 4:
        raise MalformedRecordError("truncated header")
    (count,) = _U32.unpack_from(data, pos)
    pos += 4
    records = []
    for i in range(count):
        if len(data) < pos + 4:
            raise MalformedRecordError("truncated length prefix", i)
        (n,) = _U32.unpack_from(data, pos)
        pos += 4
        if len(data) < pos + n + 4:
            raise MalformedRecordError("truncated payload", i)
        payload = data[pos : pos + n]
        pos += n
        (crc,) = _U32.unpack_from(data, pos)
        pos += 4
        if zlib.crc32(payload) != crc:
            raise ChecksumError(i)
        records.append(decode_payload(payload, i))
    if pos != len(data):
        raise MalformedRecordError(f"{len(data) - pos} trailing bytes after last record")
    return records

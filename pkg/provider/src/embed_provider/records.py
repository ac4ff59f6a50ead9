"""Interchange embedding file layout.

This is the cross-component file contract, implemented here
independently of any consumer: an 8-byte magic, a fixed little-endian
header (kind, dim, record count, normalized flag), then one record per
input of ``u32 id_len + id bytes + u32 token_count + float32 payload``.
Dense files use kind 0 with token_count 1; token files use kind 1 with
one row per token.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"LIEMBED1"
DENSE_KIND = 0
TOKEN_KIND = 1

HEADER = struct.Struct("<8sBIQB")
_U32 = struct.Struct("<I")


def encode_record(record_id: str, rows: np.ndarray) -> bytes:
    """One record in the interchange layout; ``rows`` is (token_count, dim)."""
    arr = np.ascontiguousarray(rows, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("record payload must be a 2-D row matrix")
    id_bytes = record_id.encode("utf-8")
    return b"".join(
        (_U32.pack(len(id_bytes)), id_bytes, _U32.pack(arr.shape[0]), arr.tobytes())
    )


def decode_record(blob: bytes, dim: int) -> tuple[str, np.ndarray]:
    """Inverse of :func:`encode_record`; returns (id, (token_count, dim))."""
    (id_len,) = _U32.unpack_from(blob, 0)
    offset = 4 + id_len
    record_id = blob[4:offset].decode("utf-8")
    (token_count,) = _U32.unpack_from(blob, offset)
    offset += 4
    payload = blob[offset : offset + token_count * dim * 4]
    if len(payload) != token_count * dim * 4 or blob[offset + len(payload):]:
        raise ValueError(f"record {record_id!r}: payload size does not match header")
    rows = np.frombuffer(payload, dtype="<f4").reshape(token_count, dim).copy()
    return record_id, rows


def write_file(path, kind: int, dim: int, normalized: bool, records) -> int:
    """Write records (iterable of (id, rows)) and return the count."""
    records = list(records)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, kind, dim, len(records), int(normalized)))
        for record_id, rows in records:
            fh.write(encode_record(record_id, rows))
    return len(records)

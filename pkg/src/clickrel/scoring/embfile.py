"""Binary embedding files.

Layout (little-endian): magic ``CREM``, u32 version, u32 dim, u64 count,
then per record a u32 byte length, the UTF-8 key, and ``dim`` float64s.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Iterable

import numpy as np

from ..errors import DataError

MAGIC = b"CREM"
VERSION = 1


def write_embeddings(sink: BinaryIO, items: Iterable[tuple[str, np.ndarray]], dim: int) -> int:
    items = list(items)
    sink.write(MAGIC)
    sink.write(struct.pack("<IIQ", VERSION, dim, len(items)))
    for key, vec in items:
        v = np.asarray(vec, dtype="<f8")
        if v.shape != (dim,):
            raise DataError(f"embedding for {key!r} has shape {v.shape}, expected ({dim},)")
        raw = key.encode("utf-8")
        sink.write(struct.pack("<I", len(raw)))
        sink.write(raw)
        sink.write(v.tobytes())
    return len(items)


def read_embeddings(source: BinaryIO) -> dict[str, np.ndarray]:
    if source.read(4) != MAGIC:
        raise DataError("not an embedding file (bad magic)")
    header = source.read(16)
    if len(header) != 16:
        raise DataError("truncated embedding header")
    version, dim, count = struct.unpack("<IIQ", header)
    if version != VERSION:
        raise DataError(f"unsupported embedding file version {version}")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        head = source.read(4)
        if len(head) != 4:
            raise DataError(f"embedding file truncated at record {i}")
        (n,) = struct.unpack("<I", head)
        raw = source.read(n)
        vec = source.read(8 * dim)
        if len(raw) != n or len(vec) != 8 * dim:
            raise DataError(f"embedding file truncated at record {i}")
        try:
            key = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise DataError(f"record {i}: key is not valid UTF-8") from None
        out[key] = np.frombuffer(vec, dtype="<f8").astype(np.float64)
    return out

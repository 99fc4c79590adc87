"""Flat binary weight container.

Layout: the magic ``RFEW1`` followed by one record per parameter::

    u64 name_length | name (UTF-8) | u64 rank | rank x u64 extents | float64 data

All integers and floats are little-endian. Records run to end of file.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import ParseError

MAGIC = b"RFEW1"
_U64 = struct.Struct("<Q")


def dumps(params: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC]
    for name, arr in params.items():
        arr = np.require(getattr(arr, "data", arr), dtype="<f8", requirements="C")
        raw = name.encode("utf-8")
        chunks.append(_U64.pack(len(raw)))
        chunks.append(raw)
        chunks.append(_U64.pack(arr.ndim))
        chunks.extend(_U64.pack(d) for d in arr.shape)
        chunks.append(arr.tobytes(order="C"))
    return b"".join(chunks)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[: len(MAGIC)] != MAGIC:
        raise ParseError("missing RFEW1 magic", 0)
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}

    def u64() -> int:
        nonlocal pos
        if pos + 8 > len(buf):
            raise ParseError("truncated integer field", pos)
        (v,) = _U64.unpack_from(buf, pos)
        pos += 8
        return v

    while pos < len(buf):
        n = u64()
        if pos + n > len(buf):
            raise ParseError("truncated parameter name", pos)
        try:
            name = buf[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError("parameter name is not UTF-8", pos) from None
        pos += n
        rank = u64()
        shape = tuple(u64() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = 8 * count
        if pos + nbytes > len(buf):
            raise ParseError(f"truncated data for {name!r}", pos)
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
        pos += nbytes
    return out


def save(path, params: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(params))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())

"""Flat binary container of named arrays.

Layout (little-endian)::

    magic    8 bytes  b"SQGCKPT\\0"
    version  u32
    count    u32
    count x entry:
        name_len u16, name utf-8
        dtype    2 ascii bytes (f4, f8, i4, i8, u1, b1)
        ndim     u8, shape ndim x u64
        payload  row-major bytes
    crc32    u32 over every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"SQGCKPT\0"
VERSION = 1

_TAGS = {
    np.dtype("<f4"): b"f4",
    np.dtype("<f8"): b"f8",
    np.dtype("<i4"): b"i4",
    np.dtype("<i8"): b"i8",
    np.dtype("u1"): b"u1",
    np.dtype("bool"): b"b1",
}
_DTYPES = {v: k for k, v in _TAGS.items()}


class CheckpointError(ValueError):
    pass


def dumps(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, order="C")
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + _TAGS[dt])
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype(dt, copy=False).tobytes(order="C"))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 20 or blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch")
    version, count = struct.unpack_from("<II", body, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + n].decode("utf-8")
        pos += n
        tag = body[pos:pos + 2]
        pos += 2
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag!r} for {name!r}")
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", body, pos)
        pos += 8 * ndim
        dt = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize,
                                  offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(body):
        raise CheckpointError("trailing bytes after last entry")
    return out


def save(path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(arrays))
    tmp.replace(path)


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())

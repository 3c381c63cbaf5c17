"""Portable tensor files.

Layout: 4-byte magic ``PBNT``, u16 version, u16 rank, ``rank`` u32 extents,
then the payload as little-endian float64 in row-major order.
"""
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"PBNT"
VERSION = 1


def to_bytes(array):
    arr = np.ascontiguousarray(array, dtype="<f8")
    if arr.ndim > 0xFFFF:
        raise FormatError("rank too large")
    header = MAGIC + struct.pack("<HH", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def from_bytes(buf):
    buf = bytes(buf)
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError("not a PBNT tensor (bad magic)")
    version, rank = struct.unpack_from("<HH", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported PBNT version {version}")
    off = 8 + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated PBNT header")
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) != off + 8 * count:
        raise FormatError(
            f"PBNT payload has {len(buf) - off} bytes, expected {8 * count}")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)


def save(path, array):
    Path(path).write_bytes(to_bytes(array))


def load(path):
    return from_bytes(Path(path).read_bytes())

"""Binary tensor dump format.

Layout (little-endian)::

    b"STEN" | version u32 | rank u32 | extents u64[rank] | dtype u8 | payload

dtype tag 0 is float32, 1 is float64. Payload is row-major.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"STEN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class TensorFormatError(ValueError):
    """Malformed, truncated or unsupported tensor record."""


def write_tensor(f: BinaryIO, array: np.ndarray) -> int:
    array = np.asarray(array)
    if array.dtype not in _TAGS:
        raise TensorFormatError(f"unsupported dtype {array.dtype}")
    tag = _TAGS[array.dtype]
    header = MAGIC + struct.pack("<II", VERSION, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape) + struct.pack("<B", tag)
    payload = np.ascontiguousarray(array, dtype=_DTYPES[tag]).tobytes()
    f.write(header)
    f.write(payload)
    return len(header) + len(payload)


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TensorFormatError(f"truncated tensor record: expected {n} bytes of {what}, got {len(buf)}")
    return buf


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic bytes {magic!r}, expected {MAGIC!r}")
    version, rank = struct.unpack("<II", _read_exact(f, 8, "header"))
    if version != VERSION:
        raise TensorFormatError(f"unsupported tensor format version {version} (expected {VERSION})")
    shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, "extents"))
    (tag,) = struct.unpack("<B", _read_exact(f, 1, "dtype tag"))
    if tag not in _DTYPES:
        raise TensorFormatError(f"unknown dtype tag {tag}")
    dtype = _DTYPES[tag]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    data = _read_exact(f, count * dtype.itemsize, "payload")
    return np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def save(path, array: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, array)


def load(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)

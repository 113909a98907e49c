"""DPT1 binary tensor format.

Layout (all integers little-endian)::

    bytes 0-3   magic b"DPT1"
    byte  4     dtype code (0 = float32)
    bytes 5-8   rank as u32 (always 4)
    4 * rank    dims as u32
    ...         raw little-endian float32 payload, row-major
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DPT1"
DTYPE_FLOAT32 = 0
RANK = 4
HEADER = struct.Struct("<4sBI")
# refuse payloads beyond 16 GiB of float32 before trying to allocate
MAX_ELEMENTS = 1 << 32


class TensorFormatError(ValueError):
    """Raised for any malformed DPT1 byte stream."""


def encode_tensor(x):
    x = np.asarray(x)
    if x.ndim != RANK:
        raise ValueError(f"DPT1 stores rank-4 tensors only, got shape {x.shape}")
    if x.dtype != np.float32:
        raise ValueError(f"DPT1 stores float32 only, got {x.dtype}")
    head = HEADER.pack(MAGIC, DTYPE_FLOAT32, RANK) + struct.pack("<4I", *x.shape)
    return head + np.ascontiguousarray(x, dtype="<f4").tobytes()


def decode_tensor(buf, offset=0):
    """Decode one tensor starting at ``offset``; returns ``(array, next_offset)``."""
    buf = memoryview(buf)
    if len(buf) - offset < HEADER.size:
        raise TensorFormatError("truncated DPT1 header")
    magic, dtype, rank = HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {bytes(magic)!r}")
    if dtype != DTYPE_FLOAT32:
        raise TensorFormatError(f"unsupported dtype code {dtype}")
    if rank != RANK:
        raise TensorFormatError(f"unsupported rank {rank}")
    offset += HEADER.size
    if len(buf) - offset < 4 * rank:
        raise TensorFormatError("truncated DPT1 dims")
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = 1
    for d in dims:
        if d == 0:
            raise TensorFormatError(f"zero dimension in {dims}")
        count *= d
    if count > MAX_ELEMENTS:
        raise TensorFormatError(f"dimension overflow: {dims}")
    nbytes = 4 * count
    if len(buf) - offset < nbytes:
        raise TensorFormatError(
            f"truncated payload: need {nbytes} bytes, have {len(buf) - offset}"
        )
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
    arr = data.astype(np.float32).reshape(dims)
    return arr, offset + nbytes


def tensor_write(path, x):
    path = Path(path)
    payload = encode_tensor(x)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def tensor_read(path):
    data = Path(path).read_bytes()
    arr, end = decode_tensor(data)
    if end != len(data):
        raise TensorFormatError(f"{len(data) - end} trailing bytes after tensor")
    return arr

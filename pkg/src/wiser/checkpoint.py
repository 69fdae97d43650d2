"""Binary tensor checkpoint format.

Layout (all integers little-endian)::

    b"WISR"  uint32 version
    repeated until EOF:
        uint32 name_len, name (utf-8), uint32 rank, rank * uint64 dims,
        prod(dims) * float64 values (row-major)
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import ParseError

MAGIC = b"WISR"
VERSION = 1


def dumps(tensors) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def loads(buf: bytes, path=None) -> OrderedDict:
    if buf[:4] != MAGIC:
        raise ParseError("not a WISR checkpoint (bad magic)", path=path)
    if len(buf) < 8:
        raise ParseError("truncated header", path=path)
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", path=path)
    pos = 8
    out = OrderedDict()
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            if pos + 8 * count > len(buf):
                raise ParseError(f"truncated data for tensor {name!r}", path=path)
            arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            out[name] = arr.astype(np.float64)
    except struct.error as exc:
        raise ParseError(f"truncated checkpoint: {exc}", path=path) from None
    return out


def save(path, tensors) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path) -> OrderedDict:
    return loads(Path(path).read_bytes(), path=path)

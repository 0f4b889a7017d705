"""Binary tensor archive used for model checkpoints.

Layout (little-endian)::

    b"INKL"  u16 version
    repeated: u16 name_len, name (utf-8), u8 dtype, u8 rank, u32 dims[rank], payload
    u32 crc32 of everything before it
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np

from inklpose.errors import ChecksumError, FormatError

MAGIC = b"INKL"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}


def _code(arr: np.ndarray) -> int:
    for code, dt in _DTYPES.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return code
    raise FormatError(f"unsupported dtype {arr.dtype}")


def encode(tensors: "OrderedDict[str, np.ndarray] | dict[str, np.ndarray]") -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _code(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(buf) < 10:
        raise FormatError("file too short for a checkpoint", 0)
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    body, (crc,) = buf[:-4], struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("checkpoint CRC32 mismatch", len(buf) - 4)
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    pos = 6
    end = len(body)
    while pos < end:
        start = pos
        try:
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise FormatError("truncated entry name", start)
            pos += nlen
            code, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
        except struct.error as exc:
            raise FormatError(f"truncated entry header ({exc})", start) from None
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name!r}", start)
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > end:
            raise FormatError(f"payload of {name!r} runs past end of file", pos)
        out[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
        pos += nbytes
    return out


def save(path, tensors) -> None:
    """Write atomically: a crash never leaves a half-written checkpoint behind."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors))
    os.replace(tmp, path)


def load(path) -> "OrderedDict[str, np.ndarray]":
    return decode(Path(path).read_bytes())


def pack_json(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def unpack_json(arr: np.ndarray):
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8"))

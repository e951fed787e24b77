"""Binary tensor dump: magic ``DRBT``, u32 version, u8 dtype, u32 rank, u32 dims, LE payload."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DRBT"
VERSION = 1
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def dumps(arr) -> bytes:
    arr = np.asarray(getattr(arr, "data", arr))
    code = _DTYPE_CODE.get(arr.dtype)
    if code is None:
        raise ValueError(f"cannot dump dtype {arr.dtype}")
    head = MAGIC + struct.pack("<IBI", VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()


def loads(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise ValueError("not a DRBT tensor dump")
    version, code, rank = struct.unpack_from("<IBI", buf, 4)
    if version != VERSION:
        raise ValueError(f"unsupported DRBT version {version}")
    if code not in _CODES:
        raise ValueError(f"unknown DRBT dtype code {code}")
    off = 4 + struct.calcsize("<IBI")
    shape = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    dt = _CODES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - off != count * dt.itemsize:
        raise ValueError("DRBT payload length does not match its header")
    return np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape).astype(dt.newbyteorder("="))


def save(path, arr) -> None:
    Path(path).write_bytes(dumps(arr))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())

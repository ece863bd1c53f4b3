"""TGV1: a minimal little-endian binary container for dense arrays.

Layout::

    b"TGV1" | dtype:u8 | ndim:u8 | ndim x dim:u32le | row-major payload (LE)

dtype codes are 1 = float32 and 2 = uint8.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"TGV1"
_CODES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
_BY_KIND = {np.dtype("float32"): 1, np.dtype("uint8"): 2}


def encode(array) -> bytes:
    a = np.asarray(array)
    if a.dtype == np.bool_:
        a = a.astype(np.uint8)
    code = _BY_KIND.get(a.dtype.newbyteorder("="))
    if code is None:
        raise TypeError(f"unsupported dtype {a.dtype}; TGV stores float32 or uint8")
    if not 1 <= a.ndim <= 255:
        raise ValueError(f"unsupported rank {a.ndim}")
    header = MAGIC + struct.pack("<BB", code, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    payload = np.ascontiguousarray(a, dtype=_CODES[code]).tobytes()
    return header + payload


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise FormatError("truncated magic", offset=len(buf))
    magic = bytes(buf[:4])
    if magic != MAGIC:
        if magic[:3] == MAGIC[:3]:
            raise FormatError(f"unsupported TGV version {magic!r}", offset=0)
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if len(buf) < 6:
        raise FormatError("truncated header", offset=len(buf))
    code, ndim = struct.unpack_from("<BB", buf, 4)
    if code not in _CODES:
        raise FormatError(f"unknown dtype code {code}", offset=4)
    if ndim == 0:
        raise FormatError("rank 0 not supported", offset=5)
    dims_end = 6 + 4 * ndim
    if len(buf) < dims_end:
        raise FormatError("truncated dimension table", offset=len(buf))
    shape = struct.unpack_from(f"<{ndim}I", buf, 6)
    dtype = _CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    actual = len(buf) - dims_end
    if actual != expected:
        raise FormatError(
            f"payload is {actual} bytes but header declares {expected}", offset=dims_end
        )
    out = np.frombuffer(buf, dtype=dtype, offset=dims_end).reshape(shape)
    return out.astype(dtype.newbyteorder("="), copy=True)


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tgv(array, path) -> None:
    atomic_write(path, encode(array))


def load_tgv(path) -> np.ndarray:
    return decode(Path(path).read_bytes())

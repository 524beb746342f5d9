"""LTEN tensor blobs, LCKP named containers, and atomic file writes.

LTEN::

    b"LTEN" | u16 version=1 | u8 dtype (0=F32, 1=F64) | u8 rank | rank x u64 dims | data (LE)

LCKP::

    b"LCKP" | u16 version=1 | u32 count | count x (u16 name_len | name utf-8 | payload)

The payload is an LTEN blob, except for names ending in ``.json`` whose
payload is ``u32 length | utf-8 JSON text``.
"""
from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import BadMagicError, BadVersionError, FormatError, TruncatedError
from .tensor import MAX_RANK, DType

LTEN_MAGIC = b"LTEN"
LCKP_MAGIC = b"LCKP"
VERSION = 1

_NUMPY_LE = {DType.F32: np.dtype("<f4"), DType.F64: np.dtype("<f8")}


class _Reader:
    def __init__(self, buf: bytes, offset: int = 0):
        self.buf = buf
        self.pos = offset

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"truncated payload: need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def encode_tensor(a: np.ndarray) -> bytes:
    dtype = DType.of(a)
    header = LTEN_MAGIC + struct.pack("<HBB", VERSION, int(dtype), a.ndim)
    dims = struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + dims + np.ascontiguousarray(a, dtype=_NUMPY_LE[dtype]).tobytes()


def _read_tensor(r: _Reader) -> np.ndarray:
    magic = r.take(4)
    if magic != LTEN_MAGIC:
        raise BadMagicError(f"bad magic: expected {LTEN_MAGIC!r}, got {magic!r}")
    version, code, rank = r.unpack("<HBB")
    if version != VERSION:
        raise BadVersionError(f"unsupported LTEN version {version}")
    if code not in (0, 1):
        raise FormatError(f"unknown dtype code {code}")
    if rank > MAX_RANK:
        raise FormatError(f"rank {rank} exceeds {MAX_RANK}")
    dims = r.unpack(f"<{rank}Q")
    if any(d == 0 for d in dims):
        raise FormatError(f"zero extent in dims {dims}")
    dtype = _NUMPY_LE[DType(code)]
    data = r.take(math.prod(dims) * dtype.itemsize)
    return np.frombuffer(data, dtype=dtype).reshape(dims).astype(DType(code).numpy)


def decode_tensor(buf: bytes) -> np.ndarray:
    r = _Reader(buf)
    out = _read_tensor(r)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after tensor")
    return out


def encode_container(entries: dict) -> bytes:
    """``entries`` maps names to arrays, or (``*.json`` names) to JSON-serializable objects."""
    parts = [LCKP_MAGIC, struct.pack("<HI", VERSION, len(entries))]
    for name, value in entries.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        if name.endswith(".json"):
            text = (value if isinstance(value, str) else json.dumps(value, sort_keys=True)).encode("utf-8")
            parts.append(struct.pack("<I", len(text)) + text)
        else:
            parts.append(encode_tensor(np.asarray(value)))
    return b"".join(parts)


def decode_container(buf: bytes) -> dict:
    r = _Reader(buf)
    magic = r.take(4)
    if magic != LCKP_MAGIC:
        raise BadMagicError(f"bad magic: expected {LCKP_MAGIC!r}, got {magic!r}")
    version, count = r.unpack("<HI")
    if version != VERSION:
        raise BadVersionError(f"unsupported LCKP version {version}")
    entries = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        if name in entries:
            raise FormatError(f"duplicate entry {name!r}")
        if name.endswith(".json"):
            (n,) = r.unpack("<I")
            entries[name] = json.loads(r.take(n).decode("utf-8"))
        else:
            entries[name] = _read_tensor(r)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after container")
    return entries


def atomic_write(path, data) -> None:
    """Write via a temp file in the target directory and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(path, a) -> None:
    atomic_write(path, encode_tensor(a))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def save_container(path, entries: dict) -> None:
    atomic_write(path, encode_container(entries))


def load_container(path) -> dict:
    return decode_container(Path(path).read_bytes())

"""The on-disk tensor format shared by every artifact in the project.

Single tensor file:
    magic "DGFM" | version u8 = 1 | dtype u8 (0 = float32 LE) | rank u16 LE |
    rank x u64 LE dims | row-major float32 payload

Checkpoint container:
    magic "DGFM" | version u8 = 1 | entry count u32 LE | entries, each being a
    u16 LE name length + UTF-8 name + a complete single-tensor record.

Writes are atomic: content goes to a temp file with the version byte held at
0, the version byte is patched in only after the payload is flushed, and the
temp file is renamed over the destination.  A reader can therefore never see
a truncated file as valid.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"DGFM"
VERSION = 1
DTYPE_F32 = 0


class TensorFileError(Exception):
    """Malformed or truncated tensor file."""


class TensorDataError(Exception):
    """Structurally valid file with unusable values (NaN/Inf)."""


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TensorFileError(f"truncated file: expected {n} bytes for {what}, "
                              f"got {len(buf)}")
    return buf


def _encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    payload = np.ascontiguousarray(array, dtype="<f4")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<B", VERSION))
    out.write(struct.pack("<B", DTYPE_F32))
    out.write(struct.pack("<H", array.ndim))
    for d in array.shape:
        out.write(struct.pack("<Q", d))
    out.write(payload.tobytes())
    return out.getvalue()


def _decode_tensor(f) -> np.ndarray:
    magic = _read_exact(f, 4, "magic")
    if magic != MAGIC:
        raise TensorFileError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = struct.unpack("<B", _read_exact(f, 1, "version"))[0]
    if version != VERSION:
        raise TensorFileError(f"unsupported version {version}")
    dtype = struct.unpack("<B", _read_exact(f, 1, "dtype"))[0]
    if dtype != DTYPE_F32:
        raise TensorFileError(f"unsupported dtype code {dtype}")
    rank = struct.unpack("<H", _read_exact(f, 2, "rank"))[0]
    dims = tuple(struct.unpack("<Q", _read_exact(f, 8, "dim"))[0]
                 for _ in range(rank))
    count = 1
    for d in dims:
        count *= d
    raw = _read_exact(f, 4 * count, "payload")
    arr = np.frombuffer(raw, dtype="<f4", count=count).reshape(dims)
    return arr.astype(np.float64)


def _atomic_write(path, body_after_version: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<B", 0))  # placeholder, patched below
            f.write(body_after_version)
            f.flush()
            os.fsync(f.fileno())
            f.seek(len(MAGIC))
            f.write(struct.pack("<B", VERSION))
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(path, array: np.ndarray) -> None:
    body = _encode_tensor(array)[5:]  # strip magic+version, rewritten atomically
    _atomic_write(path, body)


def load_tensor(path, check_finite: bool = True) -> np.ndarray:
    with open(path, "rb") as f:
        arr = _decode_tensor(f)
        if f.read(1):
            raise TensorFileError("trailing bytes after tensor payload")
    if check_finite and not np.all(np.isfinite(arr)):
        raise TensorDataError(f"{path}: tensor contains NaN/Inf")
    return arr


def save_container(path, tensors: dict[str, np.ndarray]) -> None:
    out = io.BytesIO()
    out.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        encoded = name.encode("utf-8")
        out.write(struct.pack("<H", len(encoded)))
        out.write(encoded)
        out.write(_encode_tensor(arr))
    _atomic_write(path, out.getvalue())


def load_container(path, check_finite: bool = True) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != MAGIC:
            raise TensorFileError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version = struct.unpack("<B", _read_exact(f, 1, "version"))[0]
        if version != VERSION:
            raise TensorFileError(f"unsupported version {version}")
        count = struct.unpack("<I", _read_exact(f, 4, "entry count"))[0]
        for _ in range(count):
            name_len = struct.unpack("<H", _read_exact(f, 2, "name length"))[0]
            name = _read_exact(f, name_len, "name").decode("utf-8")
            tensors[name] = _decode_tensor(f)
        if f.read(1):
            raise TensorFileError("trailing bytes after container entries")
    if check_finite:
        for name, arr in tensors.items():
            if not np.all(np.isfinite(arr)):
                raise TensorDataError(f"{path}: entry {name!r} contains NaN/Inf")
    return tensors

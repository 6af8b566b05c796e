"""Binary tensor files, checkpoints and atomic file helpers.

Tensor file layout (all integers little-endian)::

    b"MTAT" | version u32 | dtype u32 (0 = float32) | rank u32 | extents u64 * rank | payload

Checkpoints are a plain concatenation of ``name_len u32 | name utf-8 | tensor``
records.
"""

from __future__ import annotations

import io as _io
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

MAGIC = b"MTAT"
VERSION = 1
DTYPES = {0: np.dtype("<f4")}
MAX_ELEMENTS = 1 << 40

PathLike = Union[str, os.PathLike]


class FormatError(ValueError):
    """Malformed or truncated tensor, checkpoint or dataset file."""


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
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


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_tensor(arr) -> bytes:
    arr = np.asarray(getattr(arr, "data", arr))
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.size == 0 or 0 in arr.shape:
        raise FormatError(f"cannot write a zero-extent tensor of shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FormatError("cannot write non-finite values")
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    head = MAGIC + struct.pack("<III", VERSION, 0, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + payload


def decode_tensor(buf: bytes, offset: int = 0):
    """Parse one tensor starting at ``offset``; returns (array, next offset)."""

    def take(n):
        nonlocal offset
        if offset + n > len(buf):
            raise FormatError("truncated tensor data")
        chunk = buf[offset : offset + n]
        offset += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError("bad magic bytes")
    version, dtype, rank = struct.unpack("<III", take(12))
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    if dtype not in DTYPES:
        raise FormatError(f"unknown dtype code {dtype}")
    if rank < 1 or rank > 16:
        raise FormatError(f"invalid rank {rank}")
    shape = struct.unpack(f"<{rank}Q", take(8 * rank))
    n = 1
    for e in shape:
        if e == 0:
            raise FormatError("zero extent in tensor header")
        n *= e
        if n > MAX_ELEMENTS:
            raise FormatError("tensor extents overflow")
    dt = DTYPES[dtype]
    arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape).astype(np.float32)
    return arr, offset


def write_tensor(path: PathLike, arr) -> None:
    atomic_write_bytes(path, encode_tensor(arr))


def read_tensor(path: PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{path}: trailing bytes after tensor")
    return arr


def encode_checkpoint(tensors: Mapping[str, object]) -> bytes:
    out = _io.BytesIO()
    for name in sorted(tensors):
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        out.write(encode_tensor(tensors[name]))
    return out.getvalue()


def write_checkpoint(path: PathLike, tensors: Mapping[str, object]) -> None:
    atomic_write_bytes(path, encode_checkpoint(tensors))


def read_checkpoint(path: PathLike) -> Dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    out: Dict[str, np.ndarray] = {}
    offset = 0
    while offset < len(buf):
        if offset + 4 > len(buf):
            raise FormatError(f"{path}: truncated record header")
        (n,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if offset + n > len(buf):
            raise FormatError(f"{path}: truncated tensor name")
        name = buf[offset : offset + n].decode("utf-8")
        offset += n
        arr, offset = decode_tensor(buf, offset)
        if name in out:
            raise FormatError(f"{path}: duplicate tensor {name}")
        out[name] = arr
    return out

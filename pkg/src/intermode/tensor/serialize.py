"""Binary containers.

``AIMC`` (checkpoint)::

    b"AIMC" | u32 version | repeated { u32 name_len | name utf-8 | u8 rank | u32 dims[rank] | f32 payload }

``AIMT`` (single raw tensor)::

    b"AIMT" | u8 rank | u32 dims[rank] | f32 payload

All integers and floats are little-endian.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

CHECKPOINT_MAGIC = b"AIMC"
CHECKPOINT_VERSION = 1
TENSOR_MAGIC = b"AIMT"


class FormatError(ValueError):
    pass


def _write_dims(buf, arr: np.ndarray) -> None:
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))


def _read_exact(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise FormatError("truncated file")
    return data


def _read_array(buf) -> np.ndarray:
    (rank,) = struct.unpack("<B", _read_exact(buf, 1))
    dims = struct.unpack(f"<{rank}I", _read_exact(buf, 4 * rank)) if rank else ()
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = _read_exact(buf, 4 * count)
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)


def checkpoint_bytes(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f4", order="C")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        _write_dims(buf, arr)
        buf.write(arr.tobytes())
    return buf.getvalue()


def parse_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    buf = io.BytesIO(data)
    if _read_exact(buf, 4) != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    (version,) = struct.unpack("<I", _read_exact(buf, 4))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    while buf.tell() < len(data):
        (n,) = struct.unpack("<I", _read_exact(buf, 4))
        try:
            name = _read_exact(buf, n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("bad record name") from exc
        if name in out:
            raise FormatError(f"duplicate record {name!r}")
        out[name] = _read_array(buf)
    return out


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(checkpoint_bytes(tensors))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return parse_checkpoint(Path(path).read_bytes())


def tensor_bytes(array: np.ndarray) -> bytes:
    arr = np.asarray(array, dtype="<f4", order="C")
    buf = io.BytesIO()
    buf.write(TENSOR_MAGIC)
    _write_dims(buf, arr)
    buf.write(arr.tobytes())
    return buf.getvalue()


def parse_tensor(data: bytes) -> np.ndarray:
    buf = io.BytesIO(data)
    if _read_exact(buf, 4) != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    arr = _read_array(buf)
    if buf.read(1):
        raise FormatError("trailing bytes after tensor payload")
    return arr


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(array))


def load_tensor(path: str | Path) -> np.ndarray:
    return parse_tensor(Path(path).read_bytes())

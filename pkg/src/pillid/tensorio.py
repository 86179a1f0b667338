"""PSKT tensor container: little-endian header + raw float32 payload."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PSKT"
VERSION = 1


class TensorFormatError(ValueError):
    pass


def tensor_to_bytes(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    if t.ndim > 255:
        raise TensorFormatError("rank exceeds 255")
    header = MAGIC + struct.pack("<HB", VERSION, t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    return header + np.ascontiguousarray(t, dtype="<f4").tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise TensorFormatError("bad magic, not a PSKT tensor")
    version, rank = struct.unpack_from("<HB", buf, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported PSKT version {version}")
    shape = struct.unpack_from(f"<{rank}I", buf, 7)
    off = 7 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(buf) - off != 4 * count:
        raise TensorFormatError(f"payload holds {len(buf) - off} bytes, shape {shape} needs {4 * count}")
    return np.frombuffer(buf, dtype="<f4", offset=off).reshape(shape).astype(np.float32)


def save_tensor(path: str | Path, t: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path: str | Path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())

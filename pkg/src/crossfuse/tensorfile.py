"""Flat tensor files: ``b"CFT1"``, u8 rank, rank x u32 LE dims, f32 LE payload."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CFT1"


class TensorFileError(ValueError):
    pass


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.ndim > 255:
        raise TensorFileError(f"rank {array.ndim} does not fit in one byte")
    header = MAGIC + struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype="<f4").tobytes()


def decode_tensor(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if blob[:4] != MAGIC:
        raise TensorFileError(f"{source}: bad magic {blob[:4]!r}")
    if len(blob) < 5:
        raise TensorFileError(f"{source}: truncated header")
    rank = blob[4]
    end = 5 + 4 * rank
    if len(blob) < end:
        raise TensorFileError(f"{source}: truncated dims")
    dims = struct.unpack(f"<{rank}I", blob[5:end])
    n = int(np.prod(dims, dtype=np.int64))
    if len(blob) != end + 4 * n:
        raise TensorFileError(f"{source}: payload holds {(len(blob) - end) / 4:g} floats, dims {dims} need {n}")
    return np.frombuffer(blob, dtype="<f4", offset=end).reshape(dims).astype(np.float32)


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    return decode_tensor(path.read_bytes(), str(path))

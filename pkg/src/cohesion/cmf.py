"""Reader/writer for the CMF1 dense matrix format.

Layout: ``b"CMF1"``, uint32 LE rows, uint32 LE cols, then rows*cols
float32 LE values in row-major order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CMF1"
_HEADER = struct.Struct("<4sII")


class CMFFormatError(ValueError):
    """Raised when a file is not a well-formed CMF1 matrix."""


def write_cmf(path: str | Path, matrix: np.ndarray) -> None:
    arr = np.asarray(matrix)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {arr.shape}")
    rows, cols = arr.shape
    data = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, rows, cols))
        fh.write(data.tobytes())


def read_cmf(path: str | Path) -> np.ndarray:
    """Return the stored matrix as a float32 array of shape (rows, cols)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CMFFormatError(f"{path}: truncated header")
    magic, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CMFFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    expected = _HEADER.size + 4 * rows * cols
    if len(raw) != expected:
        raise CMFFormatError(
            f"{path}: payload is {len(raw) - _HEADER.size} bytes, header implies {4 * rows * cols}"
        )
    values = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size, count=rows * cols)
    return values.reshape(rows, cols).astype(np.float32)

"""Raw 2D array files.

Layout: a 16-byte header of four little-endian uint32 values
(magic ``0x4146434F`` = b"OCFA", dtype code, H, W) followed by H*W
little-endian values in row-major order.

dtype codes: 1 = float32, 2 = float64, 3 = int32, 4 = uint8.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"OCFA"
_CODES = {1: "<f4", 2: "<f8", 3: "<i4", 4: "u1"}
_REV = {np.dtype(v).str.lstrip("<|"): k for k, v in _CODES.items()}


class ArrayFormatError(ValueError):
    pass


def write_array(path, arr) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ArrayFormatError(f"expected a 2D array, got shape {arr.shape}")
    key = arr.dtype.str.lstrip("<>|=")
    if key not in _REV:
        raise ArrayFormatError(f"unsupported dtype {arr.dtype}")
    code = _REV[key]
    header = MAGIC + struct.pack("<III", code, arr.shape[0], arr.shape[1])
    data = np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()
    Path(path).write_bytes(header + data)


def read_array(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise ArrayFormatError(f"{path}: bad magic")
    code, h, w = struct.unpack("<III", raw[4:16])
    if code not in _CODES:
        raise ArrayFormatError(f"{path}: unknown dtype code {code}")
    dt = np.dtype(_CODES[code])
    if len(raw) - 16 != h * w * dt.itemsize:
        raise ArrayFormatError(f"{path}: payload size mismatch")
    return np.frombuffer(raw, dtype=dt, offset=16).reshape(h, w).copy()

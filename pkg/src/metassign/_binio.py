"""Shared low-level binary IO for the MASG dataset and MAWT checkpoint
formats. Every read is exact-length, so truncation always surfaces as
DatasetIntegrityError."""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import DatasetIntegrityError


def read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise DatasetIntegrityError(
            f"file truncated: wanted {n} bytes, got {len(data)}")
    return data


def write(f: BinaryIO, fmt: str, *values):
    f.write(struct.pack("<" + fmt, *values))


def read(f: BinaryIO, fmt: str):
    fmt = "<" + fmt
    return struct.unpack(fmt, read_exact(f, struct.calcsize(fmt)))


def write_array(f: BinaryIO, arr: np.ndarray, dtype: str):
    f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def read_array(f: BinaryIO, count: int, dtype: str) -> np.ndarray:
    dt = np.dtype(dtype)
    return np.frombuffer(read_exact(f, count * dt.itemsize), dtype=dt)


def expect_eof(f: BinaryIO, what: str):
    if f.read(1):
        raise DatasetIntegrityError(f"trailing bytes after {what} payload")

"""Little-endian binary primitives for the artifact file formats.

All artifact files start with a 4-byte ASCII magic (HHV1, CSM1, DCA1, SSA1).
Integers are u32 little-endian, floats are f64 little-endian, strings are
u32-length-prefixed UTF-8.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import ArtifactFormatError


def write_magic(f: BinaryIO, magic: str) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 ASCII bytes")
    f.write(magic.encode("ascii"))


def read_magic(f: BinaryIO, expected: str) -> None:
    got = f.read(4)
    if got != expected.encode("ascii"):
        raise ArtifactFormatError(
            f"bad magic header: expected {expected!r}, got {got!r}"
        )


def write_u32(f: BinaryIO, value: int) -> None:
    f.write(struct.pack("<I", int(value)))


def read_u32(f: BinaryIO) -> int:
    data = f.read(4)
    if len(data) != 4:
        raise ArtifactFormatError("truncated file while reading u32")
    return struct.unpack("<I", data)[0]


def write_str(f: BinaryIO, text: str) -> None:
    raw = text.encode("utf-8")
    write_u32(f, len(raw))
    f.write(raw)


def read_str(f: BinaryIO) -> str:
    n = read_u32(f)
    data = f.read(n)
    if len(data) != n:
        raise ArtifactFormatError("truncated file while reading string")
    return data.decode("utf-8")


def write_f64_array(f: BinaryIO, arr: np.ndarray) -> None:
    """Write array dims (ndim, then each dim as u32) followed by f64 data."""
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    write_u32(f, arr.ndim)
    for d in arr.shape:
        write_u32(f, d)
    f.write(arr.astype("<f8").tobytes())


def read_f64_array(f: BinaryIO) -> np.ndarray:
    ndim = read_u32(f)
    shape = tuple(read_u32(f) for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = f.read(8 * count)
    if len(data) != 8 * count:
        raise ArtifactFormatError("truncated file while reading f64 array")
    return np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)

"""Little-endian binary helpers shared by the on-disk formats."""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np


class FormatError(ValueError):
    """Raised when a file does not match the expected binary layout."""


def write_header(fh: BinaryIO, magic: bytes, version: int) -> None:
    fh.write(magic)
    fh.write(struct.pack("<I", version))


def read_header(fh: BinaryIO, magic: bytes, supported: tuple[int, ...]) -> int:
    got = fh.read(len(magic))
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = read_struct(fh, "<I")
    if version not in supported:
        raise FormatError(f"unsupported {magic.decode()} format version {version}")
    return version


def read_struct(fh: BinaryIO, fmt: str) -> tuple:
    size = struct.calcsize(fmt)
    buf = fh.read(size)
    if len(buf) != size:
        raise FormatError("unexpected end of file")
    return struct.unpack(fmt, buf)


def read_f32(fh: BinaryIO, count: int) -> np.ndarray:
    buf = fh.read(4 * count)
    if len(buf) != 4 * count:
        raise FormatError("unexpected end of file while reading float data")
    return np.frombuffer(buf, dtype="<f4").astype(np.float32)


def write_f32(fh: BinaryIO, data: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())

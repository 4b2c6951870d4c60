"""
MFT tensor files.

Layout, all integers little-endian::

    magic   4 bytes  b"MFT1"
    dtype   u8       code from DTYPE_CODES
    rank    u8
    extents rank × u64
    payload prod(extents) × itemsize bytes, row-major, little-endian
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from .const import MFT_MAGIC
from .errors import DataError, FormatError
from .tensor import Tensor

DTYPE_CODES: dict[int, np.dtype] = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("u1"),
    3: np.dtype("<i4"),
    4: np.dtype("<i8"),
    5: np.dtype("<i2"),
    6: np.dtype("<u2"),
}
_CODES_BY_KIND = {dtype.str[1:]: code for code, dtype in DTYPE_CODES.items()}


def dtype_code(dtype: np.dtype) -> int:
    """Return the file code of ``dtype``."""
    key = np.dtype(dtype).str[1:]
    if key not in _CODES_BY_KIND:
        msg = f"dtype {dtype} has no MFT code"
        raise DataError(msg)
    return _CODES_BY_KIND[key]


def encode_array(array: np.ndarray) -> bytes:
    """Return the header fields (without magic) and payload of ``array``."""
    array = np.asarray(array)
    code = dtype_code(array.dtype)
    header = struct.pack("<BB", code, array.ndim) + struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes()
    return header + payload


def decode_array(buffer: bytes | memoryview, offset: int) -> tuple[np.ndarray, int]:
    """Decode one array starting at ``offset``; return it and the offset after it."""
    view = memoryview(buffer)
    if len(view) < offset + 2:
        msg = "truncated array header"
        raise FormatError(msg, offset)
    code, rank = struct.unpack_from("<BB", view, offset)
    if code not in DTYPE_CODES:
        msg = f"unknown dtype code {code}"
        raise FormatError(msg, offset)
    offset += 2
    if len(view) < offset + 8 * rank:
        msg = f"truncated extents: need {8 * rank} bytes, have {len(view) - offset}"
        raise FormatError(msg, offset)
    shape = struct.unpack_from(f"<{rank}Q", view, offset)
    offset += 8 * rank
    dtype = DTYPE_CODES[code]
    expected = math.prod(shape) * dtype.itemsize
    actual = len(view) - offset
    if actual < expected:
        msg = f"truncated payload: expected {expected} bytes, got {actual}"
        raise FormatError(msg, offset)
    array = np.frombuffer(view, dtype=dtype, count=math.prod(shape), offset=offset)
    return array.reshape(shape).astype(dtype.newbyteorder("="), copy=True), offset + expected


def encode_mft(array: np.ndarray | Tensor) -> bytes:
    """Serialise ``array`` as an MFT file image."""
    data = array.data if isinstance(array, Tensor) else array
    return MFT_MAGIC + encode_array(data)


def decode_mft(buffer: bytes) -> np.ndarray:
    """Parse an MFT file image."""
    if buffer[: len(MFT_MAGIC)] != MFT_MAGIC:
        msg = f"bad magic {bytes(buffer[: len(MFT_MAGIC)])!r}, expected {MFT_MAGIC!r}"
        raise FormatError(msg, 0)
    array, end = decode_array(buffer, len(MFT_MAGIC))
    if end != len(buffer):
        msg = f"{len(buffer) - end} trailing bytes after payload"
        raise FormatError(msg, end)
    return array


def write_mft(path: str | Path, array: np.ndarray | Tensor) -> None:
    """Write ``array`` to ``path``."""
    Path(path).write_bytes(encode_mft(array))


def read_mft(path: str | Path) -> np.ndarray:
    """Read the array stored at ``path``."""
    return decode_mft(Path(path).read_bytes())

"""Little-endian binary headers: 4-byte magic, then unsigned 32-bit fields."""
from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

FORMAT_VERSION = 1


def pack_header(magic: bytes, *fields: int, version: int = FORMAT_VERSION) -> bytes:
    assert len(magic) == 4
    return magic + struct.pack(f"<{1 + len(fields)}I", version, *fields)


def unpack_header(buf: bytes, magic: bytes, n_fields: int, what: str = "file") -> tuple[tuple[int, ...], int]:
    """Validate magic/version; return the header fields and the payload offset."""
    size = 4 + 4 * (1 + n_fields)
    if len(buf) < size:
        raise FormatError(f"{what}: truncated header")
    if buf[:4] != magic:
        raise FormatError(f"{what}: bad magic {buf[:4]!r}, expected {magic!r}")
    version, *fields = struct.unpack_from(f"<{1 + n_fields}I", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{what}: unsupported format version {version}")
    return tuple(fields), size


def read_floats(buf: bytes, offset: int, count: int, dtype: str, what: str = "file") -> np.ndarray:
    itemsize = np.dtype(dtype).itemsize
    end = offset + count * itemsize
    if len(buf) != end:
        raise FormatError(f"{what}: payload is {len(buf) - offset} bytes, expected {count * itemsize}")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset).astype(np.float64)

"""Reader and writer for the WSST binary tensor container.

Layout (all little-endian)::

    4 bytes   magic  b"WSST"
    1 byte    version (1)
    1 byte    dtype  (1 = float32, 2 = uint8)
    1 byte    ndim
    ndim * 4  dims as uint32
    payload   row-major data
"""

import struct
from pathlib import Path

import numpy as np

MAGIC = b"WSST"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
_CODE_FOR = {np.dtype("<f4"): 1, np.dtype("u1"): 2}


class WSSTError(ValueError):
    """Raised for malformed WSST data; message names the source and byte offset."""

    def __init__(self, message, source="<bytes>", offset=0):
        super().__init__(f"{source}: offset {offset}: {message}")
        self.source = source
        self.offset = offset


def to_bytes(array):
    arr = np.asarray(array)
    if arr.dtype == np.uint8 or arr.dtype == np.bool_:
        arr = arr.astype("u1")
    elif np.issubdtype(arr.dtype, np.integer):
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("integer tensors must fit in uint8 for WSST")
        arr = arr.astype("u1")
    else:
        arr = arr.astype("<f4")
    if arr.ndim > 255:
        raise ValueError("too many dimensions for WSST")
    header = MAGIC + bytes([VERSION, _CODE_FOR[arr.dtype], arr.ndim])
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def from_bytes(buf, source="<bytes>"):
    buf = bytes(buf)
    if len(buf) < 7:
        raise WSSTError(f"truncated header ({len(buf)} bytes)", source, len(buf))
    if buf[:4] != MAGIC:
        raise WSSTError(f"bad magic {buf[:4]!r}", source, 0)
    if buf[4] != VERSION:
        raise WSSTError(f"unsupported version {buf[4]}", source, 4)
    if buf[5] not in DTYPE_CODES:
        raise WSSTError(f"unknown dtype code {buf[5]}", source, 5)
    dtype = DTYPE_CODES[buf[5]]
    ndim = buf[6]
    end = 7 + 4 * ndim
    if len(buf) < end:
        raise WSSTError("truncated shape block", source, len(buf))
    shape = struct.unpack(f"<{ndim}I", buf[7:end])
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - end != expected:
        raise WSSTError(
            f"payload is {len(buf) - end} bytes but shape {shape} needs {expected}", source, end
        )
    arr = np.frombuffer(buf, dtype=dtype, offset=end).reshape(shape)
    if dtype.kind == "f":
        return arr.astype(np.float32)
    return arr.copy()


def save(path, array):
    Path(path).write_bytes(to_bytes(array))


def load(path):
    path = Path(path)
    return from_bytes(path.read_bytes(), source=str(path))

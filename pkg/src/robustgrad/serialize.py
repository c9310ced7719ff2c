"""Binary tensor-table file format used for checkpoints and tensor exports.

Layout (all integers little-endian):

    offset  size  field
    0       8     magic, the ASCII bytes "ROBUSTGD"
    8       4     format version, u32 (currently 1)
    12      4     config length L, u32
    16      L     config document, UTF-8 JSON with sorted keys
    16+L    4     tensor count T, u32
    ...           T tensor records, back to back

Each tensor record:

    4     name length n, u32
    n     name, UTF-8
    1     dtype code, u8 (0 = f32, 1 = f64, 2 = i64, 3 = u8)
    1     rank r, u8
    4*r   shape, r u32 values
    *     data, little-endian, C (row-major) order

Writes go through a temp file in the target directory followed by an
atomic rename, so readers never observe a partial file. Identical
(config, tensors) input produces identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "SerializeError",
    "BadMagic",
    "TruncatedFile",
    "UnsupportedVersion",
    "save_tensors",
    "load_tensors",
    "atomic_write_bytes",
]

MAGIC = b"ROBUSTGD"
FORMAT_VERSION = 1

_DTYPE_CODES = {
    np.dtype("float32"): 0,
    np.dtype("float64"): 1,
    np.dtype("int64"): 2,
    np.dtype("uint8"): 3,
}
_CODE_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("u1"),
}


class SerializeError(Exception):
    """Base error for tensor-file reading and writing."""


class BadMagic(SerializeError):
    """The file does not start with the expected magic bytes."""


class TruncatedFile(SerializeError):
    """The file ended before a complete record was read."""


class UnsupportedVersion(SerializeError):
    """The file's format version is newer than this reader."""


def atomic_write_bytes(path, payload):
    """Write bytes to path via a same-directory temp file and rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _encode_tensor(name, array):
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _DTYPE_CODES:
        raise SerializeError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise SerializeError(f"tensor {name!r} rank {arr.ndim} exceeds format limit")
    name_bytes = name.encode("utf-8")
    header = struct.pack("<I", len(name_bytes)) + name_bytes
    header += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return header + little.tobytes(order="C")


def save_tensors(path, config, tensors):
    """Write a config dict plus named arrays; insertion order is preserved."""
    config_bytes = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<I", len(config_bytes)),
        config_bytes,
        struct.pack("<I", len(tensors)),
    ]
    for name, array in tensors.items():
        parts.append(_encode_tensor(name, array))
    atomic_write_bytes(path, b"".join(parts))


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n):
        end = self.pos + n
        if end > len(self.blob):
            raise TruncatedFile(f"{self.path}: needed {n} bytes at offset {self.pos}")
        chunk = self.blob[self.pos:end]
        self.pos = end
        return chunk

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u8(self):
        return self.take(1)[0]


def load_tensors(path):
    """Read a tensor file; returns (config dict, dict of name -> ndarray)."""
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise BadMagic(f"{path}: not a tensor file (bad magic)")
    version = r.u32()
    if version > FORMAT_VERSION:
        raise UnsupportedVersion(f"{path}: format version {version} > {FORMAT_VERSION}")
    config = json.loads(r.take(r.u32()).decode("utf-8"))
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        dtype = _CODE_DTYPES.get(r.u8())
        if dtype is None:
            raise SerializeError(f"{path}: unknown dtype code in tensor {name!r}")
        rank = r.u8()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = r.take(count * dtype.itemsize)
        arr = np.frombuffer(data, dtype=dtype).reshape(shape)
        tensors[name] = np.ascontiguousarray(arr.astype(dtype.newbyteorder("=")))
    return config, tensors

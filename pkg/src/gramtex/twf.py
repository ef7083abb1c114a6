"""Reading and writing the TWF1 tensor container.

Layout, all little-endian: magic "TWF1"; u32 version (=1); u32 tensor count;
then per tensor: u16 name length, UTF-8 name bytes, u8 ndim, ndim u32
extents, and extent-product float32 values in row-major order. The format
is bit-exact: writing the same tensors twice produces identical files.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ContractError, FormatError

MAGIC = b"TWF1"
VERSION = 1


def write_tensors(path, tensors):
    """Serialize `tensors` (mapping name -> array-like) to `path`.

    Values are cast to float32; insertion order becomes file order.
    """
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<I", len(tensors))
    for name, value in tensors.items():
        raw = name.encode("utf-8")
        if not raw:
            raise ContractError("tensor name must be non-empty")
        if len(raw) > 0xFFFF:
            raise ContractError(f"tensor name too long ({len(raw)} bytes): {name[:40]}...")
        arr = np.asarray(value, dtype=np.float32)
        if arr.ndim > 0xFF:
            raise ContractError(f"tensor {name!r} has {arr.ndim} dimensions, limit is 255")
        blob += struct.pack("<H", len(raw))
        blob += raw
        blob += struct.pack("<B", arr.ndim)
        for extent in arr.shape:
            if extent > 0xFFFFFFFF:
                raise ContractError(f"tensor {name!r} extent {extent} exceeds u32")
            blob += struct.pack("<I", extent)
        blob += arr.astype("<f4", copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def read_tensors(path):
    """Parse a TWF1 file into an ordered dict of name -> float32 ndarray."""
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated TWF1 file: ran out of bytes reading {what}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    magic = take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported TWF1 version {version}, expected {VERSION}")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"tensor name is not valid UTF-8: {exc}") from exc
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}")
        (ndim,) = struct.unpack("<B", take(1, f"ndim of {name!r}"))
        shape = tuple(
            struct.unpack("<I", take(4, f"extent of {name!r}"))[0] for _ in range(ndim)
        )
        n_values = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = take(4 * n_values, f"values of {name!r}")
        arr = np.frombuffer(raw, dtype="<f4", count=n_values).reshape(shape)
        out[name] = arr.astype(np.float32)  # copy: writable, native byte order
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last tensor")
    return out

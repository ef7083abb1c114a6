"""TWF1 container writer/reader.

Layout, all little-endian: magic b"TWF1", u32 version (1), u32 tensor
count, then per tensor a u16 name length, the UTF-8 name, a u8 rank,
rank u32 extents, and row-major float32 payload. This is an independent
implementation of the format so files written here cross an
implementation boundary when the engine reads them back.
"""

import struct

import numpy as np

MAGIC = b"TWF1"
VERSION = 1


class FormatError(Exception):
    pass


def write(path, tensors):
    """Write named tensors in mapping order; values are cast to float32."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(tensors))
    for name, value in tensors.items():
        arr = np.asarray(value, dtype=np.float32)
        encoded = str(name).encode("utf-8")
        if not 0 < len(encoded) <= 0xFFFF:
            raise FormatError(f"tensor name out of range: {name!r}")
        if arr.ndim > 0xFF:
            raise FormatError(f"tensor {name!r} has rank {arr.ndim}")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype("<f4", copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def read(path):
    """Read a TWF1 file back into an ordered name -> float32 array dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated file while reading {what}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a TWF1 file")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * size, f"payload of {name!r}"), dtype="<f4")
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}")
        out[name] = data.reshape(shape).astype(np.float32)
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes after last tensor")
    return out

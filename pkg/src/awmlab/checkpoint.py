"""Binary checkpoint format.

Layout: the 8 magic bytes ``AWMCKPT1`` followed by zero or more entries, each
``u32 name_len | utf-8 name | u32 rank | u32 dims[rank] | f32 data[prod(dims)]``,
all little-endian. The entry list runs to end of file.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"AWMCKPT1"


def encode(entries) -> bytes:
    out = bytearray(MAGIC)
    for name, arr in entries.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


def decode(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if buf[:8] != MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:8]!r}", offset=0)
    entries = OrderedDict()
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint: need {n} bytes", offset=pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32)
        if name in entries:
            raise FormatError(f"duplicate entry {name!r}", offset=pos)
        entries[name] = data.reshape(dims)
    return entries


def save(path, entries):
    Path(path).write_bytes(encode(entries))


def load(path):
    return decode(Path(path).read_bytes())

"""Portable binary weight file ("TDLW") shared by extractors and checkpoints.

Layout, all little-endian:
    magic "TDLW" | version u32 | tensor count u32
    per tensor: name length u16 | UTF-8 name | dtype byte (0 = float32)
                | rank byte | extents u32 each | raw row-major float32 data
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"TDLW"
FORMAT_VERSION = 1
DTYPE_F32 = 0


class WeightFormatError(Exception):
    """Base class for portable weight-file failures."""


class BadMagicError(WeightFormatError):
    """File does not start with the TDLW magic bytes."""


class TruncatedFileError(WeightFormatError):
    """File ended before the declared contents."""


class UnsupportedFieldError(WeightFormatError):
    """Unknown format version or dtype code."""


def dump_weights(tensors) -> bytes:
    """Serialize an ordered {name: ndarray} mapping (cast to float32)."""
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise WeightFormatError(f"tensor name too long: {name!r}")
        arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would 1-d-ify rank 0
        if not arr.flags.c_contiguous:
            arr = arr.copy()
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def save_weights(path, tensors):
    with open(path, "wb") as fh:
        fh.write(dump_weights(tensors))


def parse_weights(blob: bytes):
    """Inverse of dump_weights; returns an ordered {name: float32 ndarray}."""
    view = memoryview(blob)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedFileError(f"file ends inside {what}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise BadMagicError("not a TDLW weight file (bad magic bytes)")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != FORMAT_VERSION:
        raise UnsupportedFieldError(f"unsupported format version {version}")
    count = struct.unpack("<I", take(4, "tensor count"))[0]

    tensors = OrderedDict()
    for i in range(count):
        nlen = struct.unpack("<H", take(2, "name length"))[0]
        name = bytes(take(nlen, "name")).decode("utf-8")
        dtype_code, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if dtype_code != DTYPE_F32:
            raise UnsupportedFieldError(
                f"tensor {name!r}: unsupported dtype code {dtype_code}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        n_values = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = take(4 * n_values, f"data of {name!r}")
        if name in tensors:
            raise WeightFormatError(f"duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if pos != len(view):
        raise WeightFormatError(f"{len(view) - pos} trailing bytes after payload")
    return tensors


def load_weights(path):
    with open(path, "rb") as fh:
        return parse_weights(fh.read())


def write_sidecar(path, entries):
    """Plain-text key/value sidecar accompanying a checkpoint."""
    lines = [f"{k} = {v}" for k, v in entries.items()]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_sidecar(path):
    entries = OrderedDict()
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            entries[key.strip()] = value.strip()
    return entries

"""``PMLP`` parameter checkpoints.

Layout, little-endian throughout::

    b"PMLP" | version u32 | entry count u32
    per entry: name length u32 | UTF-8 name | rank u32 | dims u32 * rank | f32 payload
"""

import struct

import numpy as np

from ._binary import Reader
from .errors import BadMagicError, FormatError, VersionError

MAGIC = b"PMLP"
VERSION = 1


def encode_tensors(tensors):
    """Serialise an ordered mapping of name -> array to bytes."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f4", copy=False).tobytes(order="C"))
    return b"".join(parts)


def decode_tensors(buf):
    if len(buf) < 4 or bytes(buf[:4]) != MAGIC:
        raise BadMagicError("not a PMLP checkpoint (bad magic)")
    r = Reader(buf)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise VersionError(f"unsupported PMLP version {version}")
    count = r.u32()
    out = {}
    for _ in range(count):
        try:
            name = bytes(r.take(r.u32())).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not valid UTF-8") from exc
        rank = r.u32()
        shape = tuple(struct.unpack(f"<{rank}I", r.take(4 * rank)))
        n = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
        out[name] = data
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after last tensor")
    return out


def save_tensors(path, tensors):
    with open(path, "wb") as fh:
        fh.write(encode_tensors(tensors))


def load_tensors(path):
    with open(path, "rb") as fh:
        return decode_tensors(fh.read())

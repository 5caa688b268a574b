"""Little-endian weight file.

Layout: the magic ``DRIUW1\\n`` followed by zero or more records, each
``u32 name_len | name (utf-8) | u32 rank | u32 dims[rank] | f32 payload``.
"""
import struct

import numpy as np

from ..errors import FormatError
from .atomic import atomic_write

MAGIC = b"DRIUW1\n"
MAX_RANK = 8


def save_weights(params):
    out = [MAGIC]
    for name, tensor in params.items():
        arr = np.asarray(tensor, dtype="<f4")  # keeps rank 0; tobytes() is C order
        encoded = name.encode("utf-8")
        out.append(struct.pack("<I", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def load_weights(data):
    """Parse a weight file into an ordered ``{name: float32 array}``."""
    data = bytes(data)
    if not data.startswith(MAGIC):
        raise FormatError("bad magic, not a DRIUW1 weight file", offset=0)
    pos, n = len(MAGIC), len(data)
    tensors = {}

    def take(count, what):
        nonlocal pos
        if n - pos < count:
            raise FormatError(f"truncated {what}", offset=pos)
        chunk = data[pos:pos + count]
        pos += count
        return chunk

    while pos < n:
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        start = pos
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid utf-8", offset=start) from None
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}", offset=start)
        (rank,) = struct.unpack("<I", take(4, "rank"))
        if rank > MAX_RANK:
            raise FormatError(f"rank {rank} exceeds {MAX_RANK}", offset=pos - 4)
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        count = 1
        for d in dims:
            count *= d
        if count * 4 > n - pos:
            raise FormatError(f"payload of {name!r} overruns the file ({dims})", offset=pos)
        payload = take(count * 4, "payload")
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    return tensors


def write_weight_file(path, params):
    data = save_weights(params)
    with atomic_write(path) as fh:
        fh.write(data)


def read_weight_file(path):
    with open(path, "rb") as fh:
        return load_weights(fh.read())

"""Self-describing binary container for dense float64 arrays.

Layout (all little-endian)::

    b"TNSR" | rank: uint8 | dims: rank x uint32 | payload: prod(dims) x float64

The payload is row-major. Used for token grids, anchor tables, Gaussian weight
matrices and modulation fields exchanged through the CLI.
"""

import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"TNSR"


def encode_tensor(array):
    arr = np.asarray(array, dtype="<f8", order="C")  # keeps rank 0, unlike ascontiguousarray
    if arr.ndim > 255:
        raise FormatError(f"rank {arr.ndim} does not fit in a uint8")
    header = MAGIC + struct.pack("<B", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(blob):
    blob = bytes(blob)
    if len(blob) < 5 or blob[:4] != MAGIC:
        raise FormatError("not a TNSR container (bad magic)")
    rank = blob[4]
    head = 5 + 4 * rank
    if len(blob) < head:
        raise FormatError("truncated TNSR header")
    dims = struct.unpack(f"<{rank}I", blob[5:head])
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) != head + 8 * count:
        raise FormatError(
            f"TNSR payload is {len(blob) - head} bytes, expected {8 * count} for dims {dims}"
        )
    arr = np.frombuffer(blob, dtype="<f8", offset=head, count=count)
    return arr.astype(np.float64).reshape(dims)


def write_tensor(path, array):
    data = encode_tensor(array)
    with open(os.fspath(path), "wb") as fh:
        fh.write(data)


def read_tensor(path):
    with open(os.fspath(path), "rb") as fh:
        return decode_tensor(fh.read())

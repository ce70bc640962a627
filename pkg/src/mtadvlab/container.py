"""Binary container shared by model checkpoints and saved datasets.

Layout::

    MTADVLAB <kind> 1\\n
    <header: one line of canonical JSON>\\n
    <float block: little-endian float64, arrays concatenated in header order>

The header lists every array as ``[name, shape]``; the float block holds them
row-major in that order.  Round trips are bit-exact.
"""
import json

import numpy as np

MAGIC = b"MTADVLAB"
VERSION = 1


def write_container(path, kind, header, arrays):
    layout = [[name, list(np.shape(a))] for name, a in arrays.items()]
    meta = dict(header, arrays=layout)
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + b" " + kind.encode() + b" " + str(VERSION).encode() + b"\n")
        fh.write(blob + b"\n")
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_container(path, kind):
    """Return ``(header, arrays)``; raises ``ValueError`` on a foreign file."""
    with open(path, "rb") as fh:
        first = fh.readline().rstrip(b"\n").split(b" ")
        if len(first) != 3 or first[0] != MAGIC:
            raise ValueError(f"{path}: not an mtadvlab container")
        if first[1].decode() != kind:
            raise ValueError(f"{path}: expected a {kind!r} container, found {first[1].decode()!r}")
        if int(first[2]) != VERSION:
            raise ValueError(f"{path}: unsupported container version {first[2].decode()}")
        header = json.loads(fh.readline())
        block = np.frombuffer(fh.read(), dtype="<f8")
    arrays = {}
    offset = 0
    for name, shape in header.pop("arrays"):
        size = int(np.prod(shape)) if shape else 1
        if offset + size > block.size:
            raise ValueError(f"{path}: truncated float block at {name!r}")
        arrays[name] = block[offset:offset + size].reshape(shape).astype(np.float64)
        offset += size
    if offset != block.size:
        raise ValueError(f"{path}: {block.size - offset} trailing values")
    return header, arrays

"""Binary tensor and checkpoint serialization.

Tensor wire format: u32 little-endian rank, u32 dims, then the row-major
float64 payload (little-endian). Checkpoints are a magic/version header
followed by a named tensor table in insertion order.
"""

import struct

import numpy as np

CHECKPOINT_MAGIC = b"LNLC"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    pass


def write_tensor(f, arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    f.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(arr.astype("<f8").tobytes())


def read_tensor(f):
    raw = f.read(4)
    if len(raw) != 4:
        raise FormatError("truncated tensor header")
    (rank,) = struct.unpack("<I", raw)
    dims = []
    for _ in range(rank):
        raw = f.read(4)
        if len(raw) != 4:
            raise FormatError("truncated tensor dims")
        dims.append(struct.unpack("<I", raw)[0])
    count = int(np.prod(dims)) if dims else 1
    payload = f.read(8 * count)
    if len(payload) != 8 * count:
        raise FormatError(f"truncated tensor payload: wanted {8 * count} bytes")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).copy()


def save_checkpoint(path, named_arrays):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(named_arrays)))
        for name, arr in named_arrays.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            write_tensor(f, arr)


def load_checkpoint(path):
    out = {}
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic: {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", f.read(4))
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            out[name] = read_tensor(f)
    return out

"""Binary tensor container and CSV export.

Container layout (all integers little-endian):

    magic b"TNS1" | u32 count | count * record
    record: u16 name_len | name utf-8 | u8 ndim | ndim * u32 dims | raw <f8 data

Used for checkpoints and diagnostic dumps. Writing is deterministic given
the mapping's insertion order.
"""

import struct

import numpy as np

MAGIC = b"TNS1"


def save_tensors(path, tensors):
    """Write an ordered mapping of name -> float64 array."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
            arr = np.asarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes())


def load_tensors(path):
    """Read a container written by save_tensors; returns name -> array."""
    out = {}
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a tensor container")
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            out[name] = data.copy()
    return out


def format_float(x):
    """Shortest round-trip decimal form; keeps CSV output reproducible."""
    return repr(float(x))


def tensor_to_csv(arr, path):
    """Dump a 1-d or 2-d array as plain CSV (no header)."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError("tensor_to_csv: expects a vector or matrix")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in arr:
            fh.write(",".join(format_float(v) for v in row))
            fh.write("\n")

"""Flat binary checkpoint container.

Layout: magic "ERMF", version u32, then per-tensor records of
(name length u32, UTF-8 name, rank u32, extents u32 each, little-endian
f64 payload) until EOF. All integers little-endian.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"ERMF"
VERSION = 1


class ErmfError(RuntimeError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            for ext in arr.shape:
                fh.write(struct.pack("<I", ext))
            fh.write(arr.tobytes(order="C"))


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ErmfError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise ErmfError(f"{path}: unsupported version {version}")
    out = {}
    off = 8
    while off < len(data):
        if off + 4 > len(data):
            raise ErmfError(f"{path}: truncated record header")
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", data, off) if rank else ()
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        nbytes = 8 * count
        if off + nbytes > len(data):
            raise ErmfError(f"{path}: truncated payload for '{name}'")
        out[name] = np.frombuffer(data[off:off + nbytes], dtype="<f8").reshape(shape).copy()
        off += nbytes
    return out

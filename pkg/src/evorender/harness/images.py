"""Image buffers: row-major RGB float arrays in [0,1], written as binary
PPM (P6) or PNG, both 8-bit."""

from __future__ import annotations

import numpy as np
from PIL import Image


class ImageIOError(RuntimeError):
    pass


def _to_bytes(buf):
    buf = np.asarray(buf, dtype=np.float64)
    if buf.ndim != 3 or buf.shape[2] != 3:
        raise ImageIOError(f"expected HxWx3 buffer, got shape {buf.shape}")
    return (np.clip(buf, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_image(buf, path, fmt=None):
    """fmt inferred from the extension when omitted ('.ppm' or '.png')."""
    path = str(path)
    if fmt is None:
        fmt = "png" if path.lower().endswith(".png") else "ppm"
    data = _to_bytes(buf)
    h, w = data.shape[:2]
    try:
        if fmt == "ppm":
            with open(path, "wb") as fh:
                fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
                fh.write(data.tobytes())
        elif fmt == "png":
            Image.fromarray(data, mode="RGB").save(path, format="PNG")
        else:
            raise ImageIOError(f"unknown image format {fmt!r}")
    except OSError as e:
        raise ImageIOError(f"cannot write image '{path}': {e}")


def read_image(path):
    path = str(path)
    try:
        if path.lower().endswith(".ppm"):
            return _read_ppm(path)
        with Image.open(path) as im:
            data = np.asarray(im.convert("RGB"), dtype=np.float64)
        return data / 255.0
    except OSError as e:
        raise ImageIOError(f"cannot read image '{path}': {e}")


def _read_ppm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    # header: magic, width, height, maxval, single whitespace, then pixels
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageIOError(f"truncated PPM header in '{path}'")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P6":
        raise ImageIOError(f"'{path}' is not a binary PPM (P6)")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ImageIOError(f"unsupported PPM maxval {maxval} in '{path}'")
    need = w * h * 3
    pixels = raw[pos : pos + need]
    if len(pixels) < need:
        raise ImageIOError(f"truncated PPM pixel data in '{path}'")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float64) / 255.0

"""Image and raster IO: PPM (P6), PNG, and the float32 depth raster."""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image

DEPTH_MAGIC = b"KNFD"
# 16-byte header: magic, u32 width, u32 height, u32 reserved (all little-endian)
_DEPTH_HEADER = struct.Struct("<4sIII")


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[0,1] float image to 8-bit with round-half-away quantization."""
    return (np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path, img: np.ndarray):
    u8 = img if img.dtype == np.uint8 else to_uint8(img)
    h, w = u8.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(u8.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise ValueError("not a binary PPM (P6) file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError("only 8-bit PPM supported")
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pix.reshape(h, w, 3).copy()


def write_png(path, img: np.ndarray):
    u8 = img if img.dtype == np.uint8 else to_uint8(img)
    Image.fromarray(u8, mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


def write_image(path, img: np.ndarray):
    """Pick the container from the extension (.ppm or .png)."""
    p = str(path)
    if p.endswith(".ppm"):
        write_ppm(p, img)
    elif p.endswith(".png"):
        write_png(p, img)
    else:
        raise ValueError("image path must end in .ppm or .png")


def read_image_float(path) -> np.ndarray:
    p = str(path)
    u8 = read_ppm(p) if p.endswith(".ppm") else read_png(p)
    return u8.astype(np.float64) / 255.0


def write_depth_raster(path, depth: np.ndarray):
    """Raw float32 little-endian raster behind a 16-byte header."""
    d = np.asarray(depth, dtype="<f4")
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(_DEPTH_HEADER.pack(DEPTH_MAGIC, w, h, 0))
        fh.write(d.tobytes())


def read_depth_raster(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(_DEPTH_HEADER.size)
        magic, w, h, _ = _DEPTH_HEADER.unpack(head)
        if magic != DEPTH_MAGIC:
            raise ValueError("bad depth raster magic")
        data = fh.read(4 * w * h)
    if len(data) != 4 * w * h:
        raise ValueError("truncated depth raster")
    return np.frombuffer(data, dtype="<f4").reshape(h, w).copy()

"""Binary NetPBM (P5/P6) and raw float64 map I/O."""
import struct

import numpy as np

MAP_MAGIC = b"WF64"


def _read_token(fh):
    token = b""
    while True:
        ch = fh.read(1)
        if not ch:
            break
        if ch == b"#":
            fh.readline()
            continue
        if ch.isspace():
            if token:
                break
            continue
        token += ch
    return token


def read_pnm(path):
    """Read an 8-bit P5 (h, w) or P6 (h, w, 3) image as uint8."""
    with open(path, "rb") as fh:
        magic = _read_token(fh)
        if magic not in (b"P5", b"P6"):
            raise ValueError(f"{path}: unsupported NetPBM type {magic!r}")
        width, height, maxval = (int(_read_token(fh)) for _ in range(3))
        if maxval != 255:
            raise ValueError(f"{path}: only maxval 255 is supported")
        channels = 3 if magic == b"P6" else 1
        data = fh.read(width * height * channels)
    if len(data) != width * height * channels:
        raise ValueError(f"{path}: truncated pixel data")
    img = np.frombuffer(data, dtype=np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return img.reshape(shape).copy()


def write_pnm(path, img):
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    elif img.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"cannot write array of shape {img.shape} as NetPBM")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())


def write_float_map(path, values):
    """Lossless float64 raster: magic, uint32 width, uint32 height, then LE row-major data."""
    values = np.asarray(values, dtype="<f8")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(MAP_MAGIC + struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(values).tobytes())


def read_float_map(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAP_MAGIC:
            raise ValueError(f"{path}: not a float map")
        w, h = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.reshape(h, w).astype(np.float64)

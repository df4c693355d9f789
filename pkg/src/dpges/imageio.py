"""Minimal PPM/PGM and PFM readers and writers.

Images travel through the package as float64 arrays of shape (H, W, 3) or
(H, W) with linear values; 8-bit files map to [0, 1] by division by the
maxval, and writing quantizes with round-half-even after clamping, so an
8-bit file survives a read/write cycle byte for byte.
"""

from __future__ import annotations

import os
import sys

import numpy as np


class ImageFormatError(ValueError):
    pass


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ImageFormatError("truncated header")
    return buf[start:pos], pos


def read_pnm_raw(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    """Read a binary P5/P6 file and return the stored integers unchanged."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported magic {magic!r}")
    width, pos = _read_token(buf, pos)
    height, pos = _read_token(buf, pos)
    maxval, pos = _read_token(buf, pos)
    try:
        w, h, mx = int(width), int(height), int(maxval)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed header") from exc
    if not (0 < mx < 65536):
        raise ImageFormatError(f"{path}: bad maxval {mx}")
    pos += 1  # single whitespace byte before the raster
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if mx > 255 else np.dtype("u1")
    count = w * h * channels
    if len(buf) - pos < count * dtype.itemsize:
        raise ImageFormatError(f"{path}: truncated raster")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape), mx


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    raw, maxval = read_pnm_raw(path)
    return raw.astype(np.float64) / float(maxval)


def quantize(img: np.ndarray, maxval: int = 255) -> np.ndarray:
    q = np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * maxval)
    return q.astype(np.uint8 if maxval <= 255 else np.uint16)


def write_ppm(path: str | os.PathLike, img: np.ndarray, maxval: int = 255) -> None:
    img = np.asarray(img)
    if img.dtype.kind == "f":
        img = quantize(img, maxval)
    if img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    elif img.ndim == 2:
        magic = b"P5"
    else:
        raise ImageFormatError(f"cannot write array of shape {img.shape} as PNM")
    h, w = img.shape[:2]
    header = b"%s\n%d %d\n%d\n" % (magic, w, h, maxval)
    body = img.astype(">u2" if maxval > 255 else "u1").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + body)


def read_pfm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pos = _read_token(buf, 0)
    if magic == b"PF":
        channels = 3
    elif magic == b"Pf":
        channels = 1
    else:
        raise ImageFormatError(f"{path}: not a PFM file")
    width, pos = _read_token(buf, pos)
    height, pos = _read_token(buf, pos)
    scale_tok, pos = _read_token(buf, pos)
    pos += 1
    try:
        w, h, scale = int(width), int(height), float(scale_tok)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed PFM header") from exc
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    if len(buf) - pos < w * h * channels * 4:
        raise ImageFormatError(f"{path}: truncated PFM data")
    data = np.frombuffer(buf, dtype=dtype, count=w * h * channels, offset=pos)
    shape = (h, w, 3) if channels == 3 else (h, w)
    # PFM rows run bottom to top
    return data.reshape(shape)[::-1].astype(np.float64)


def write_pfm(path: str | os.PathLike, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        magic = b"PF"
    elif img.ndim == 2:
        magic = b"Pf"
    else:
        raise ImageFormatError(f"cannot write array of shape {img.shape} as PFM")
    h, w = img.shape[:2]
    scale = -1.0 if sys.byteorder == "little" else 1.0
    header = b"%s\n%d %d\n%s\n" % (magic, w, h, repr(scale).encode())
    body = np.ascontiguousarray(img[::-1]).astype("=f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + body)


def read_image(path: str | os.PathLike) -> np.ndarray:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pfm":
        return read_pfm(path)
    if ext in (".ppm", ".pgm", ".pnm"):
        return read_ppm(path)
    raise ImageFormatError(f"{path}: unsupported image extension {ext!r}")


def write_image(path: str | os.PathLike, img: np.ndarray) -> None:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pfm":
        write_pfm(path, img)
    elif ext in (".ppm", ".pgm", ".pnm"):
        write_ppm(path, img)
    else:
        raise ImageFormatError(f"{path}: unsupported image extension {ext!r}")

"""Binary PPM (P6, 8-bit) color images and PGM (P5, 16-bit) depth maps."""

from __future__ import annotations

import re

import numpy as np

from .errors import FormatError

_DEPTH_TAG = "# depth_scale "


def _read_header(data: bytes, magic: bytes):
    if not data.startswith(magic):
        raise FormatError(f"expected {magic.decode()} image")
    pos = 2
    fields = []
    comments = []
    while len(fields) < 3:
        m = re.compile(rb"\s*(#[^\n]*\n)?").match(data, pos)
        while m and m.group(1):
            comments.append(m.group(1).decode("ascii").strip())
            pos = m.end()
            m = re.compile(rb"\s*(#[^\n]*\n)?").match(data, pos)
        m = re.compile(rb"\s*(\d+)").match(data, pos)
        if not m:
            raise FormatError("truncated image header")
        fields.append(int(m.group(1)))
        pos = m.end()
    if pos >= len(data) or data[pos:pos + 1] not in b" \t\r\n":
        raise FormatError("missing whitespace after image header")
    return fields, comments, pos + 1


def encode_ppm(img) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def write_ppm(path, img) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(img))


def decode_ppm(data: bytes) -> np.ndarray:
    (w, h, maxval), _, start = _read_header(data, b"P6")
    if maxval != 255:
        raise FormatError("only 8-bit PPM is supported")
    if len(data) - start < w * h * 3:
        raise FormatError("PPM pixel data is truncated")
    px = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=start)
    return px.reshape(h, w, 3).astype(np.float64) / 255.0


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def encode_pgm16(depth, scale: float | None = None) -> bytes:
    """Depth quantized as round(depth * scale); the scale is recorded in a header comment."""
    depth = np.nan_to_num(np.asarray(depth, dtype=np.float64), nan=0.0, posinf=0.0)
    h, w = depth.shape
    if scale is None:
        peak = float(depth.max()) if depth.size else 0.0
        scale = 65535.0 / peak if peak > 0 else 1.0
    q = np.clip(np.round(depth * scale), 0, 65535).astype(">u2")
    header = f"P5\n{_DEPTH_TAG}{float(scale)!r}\n{w} {h}\n65535\n"
    return header.encode("ascii") + q.tobytes()


def write_pgm16(path, depth, scale: float | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm16(depth, scale))


def decode_pgm16(data: bytes) -> tuple[np.ndarray, float]:
    (w, h, maxval), comments, start = _read_header(data, b"P5")
    if maxval != 65535:
        raise FormatError("only 16-bit PGM is supported")
    scale = 1.0
    for c in comments:
        if c.startswith(_DEPTH_TAG):
            scale = float(c[len(_DEPTH_TAG):])
    if len(data) - start < w * h * 2:
        raise FormatError("PGM pixel data is truncated")
    q = np.frombuffer(data, dtype=">u2", count=w * h, offset=start).reshape(h, w)
    return q.astype(np.float64) / scale, scale


def read_pgm16(path) -> tuple[np.ndarray, float]:
    with open(path, "rb") as fh:
        return decode_pgm16(fh.read())

"""Evaluation preprocessing for binary PPM images.

Resize so the short edge is 256 (bilinear, half-pixel centres), centre-crop
224x224, scale to [0, 1], then normalise per channel.  The resize/crop sizes
are the standard 256/224 evaluation protocol; the mean/std constants are the
common ImageNet convention.
"""

from __future__ import annotations

import math
import os

import numpy as np

from .errors import CorruptFileError

RESIZE_SHORT = 256
CROP = 224
MEAN = (0.485, 0.456, 0.406)
STD = (0.229, 0.224, 0.225)


def parse_ppm(buf: bytes) -> np.ndarray:
    """Decode a P6 PPM (8-bit, maxval 255) into an ``[H, W, 3]`` uint8 array."""
    pos = 0

    def skip_space_and_comments():
        nonlocal pos
        while pos < len(buf):
            ch = buf[pos:pos + 1]
            if ch == b"#":
                end = buf.find(b"\n", pos)
                pos = len(buf) if end < 0 else end + 1
            elif ch.isspace():
                pos += 1
            else:
                return

    def read_int(what: str) -> int:
        nonlocal pos
        skip_space_and_comments()
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise CorruptFileError(f"PPM header: expected {what}", start)
        return int(buf[start:pos])

    if buf[:2] != b"P6":
        raise CorruptFileError("not a binary P6 PPM", 0)
    pos = 2
    width = read_int("width")
    height = read_int("height")
    maxval_at = pos
    maxval = read_int("maxval")
    if width < 1 or height < 1:
        raise CorruptFileError(f"PPM has empty extent {width}x{height}", maxval_at)
    if maxval != 255:
        raise CorruptFileError(f"only maxval 255 is supported, got {maxval}", maxval_at)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise CorruptFileError("PPM header must end with a single whitespace byte", pos)
    pos += 1
    need = width * height * 3
    if len(buf) - pos != need:
        raise CorruptFileError(f"PPM pixel data has {len(buf) - pos} bytes, expected {need}", pos)
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(height, width, 3)


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return parse_ppm(f.read())


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def short_edge_size(h: int, w: int, short: int = RESIZE_SHORT) -> tuple[int, int]:
    """Target (height, width) with the short edge at ``short``; long edge rounded half-up."""
    if h <= w:
        return short, int(math.floor(w * short / h + 0.5))
    return int(math.floor(h * short / w + 0.5)), short


def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a ``[C, H, W]`` float array with half-pixel centres.

    Source coordinate for output index ``i`` is ``(i + 0.5) * in / out - 0.5``,
    clamped to ``[0, in - 1]``.
    """
    img = np.asarray(image, dtype=np.float64)
    _, h, w = img.shape
    y0, y1, fy = _axis_weights(h, out_h)
    x0, x1, fx = _axis_weights(w, out_w)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bottom = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


def center_crop(image: np.ndarray, size: int = CROP) -> np.ndarray:
    _, h, w = image.shape
    if h < size or w < size:
        raise ValueError(f"cannot crop {size}x{size} from {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return image[:, top:top + size, left:left + size]


def preprocess(image: np.ndarray) -> np.ndarray:
    """``[H, W, 3]`` uint8 image -> normalised ``[1, 3, 224, 224]`` float32 tensor."""
    chw = np.asarray(image).transpose(2, 0, 1).astype(np.float64) / 255.0
    nh, nw = short_edge_size(*chw.shape[1:])
    chw = center_crop(resize_bilinear(chw, nh, nw))
    mean = np.asarray(MEAN)[:, None, None]
    std = np.asarray(STD)[:, None, None]
    return ((chw - mean) / std)[None].astype(np.float32)

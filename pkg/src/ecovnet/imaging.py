"""Image file I/O (binary PGM, PNG via Pillow) and bilinear resizing."""

from __future__ import annotations

import os
import re

import numpy as np

from ecovnet.errors import ImageFormatError

_PGM_HEADER = re.compile(rb"\AP5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    m = _PGM_HEADER.match(raw)
    if not m:
        raise ImageFormatError(f"{path}: not a binary (P5) PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval > 255:
        raise ImageFormatError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    body = raw[m.end():m.end() + w * h]
    if len(body) != w * h:
        raise ImageFormatError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 2:
        raise ImageFormatError("write_pgm takes a 2-D uint8 array")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(image.tobytes())


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.format != "PNG":
            raise ImageFormatError(f"{path}: not a PNG file")
        if im.mode != "L":
            raise ImageFormatError(f"{path}: PNG must be 8-bit grayscale, got mode {im.mode}")
        return np.asarray(im, dtype=np.uint8).copy()


def read_gray(path) -> np.ndarray:
    """Read an 8-bit grayscale PGM (P5) or PNG as a uint8 array."""
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head.startswith(b"P5"):
        return read_pgm(path)
    if head.startswith(b"\x89PNG"):
        return read_png(path)
    raise ImageFormatError(f"{path}: unsupported image format")


def write_rgb(path, rgb: np.ndarray) -> str:
    """Write an RGB uint8 image as PNG; falls back to binary PPM when Pillow is missing.

    Returns the path actually written.
    """
    try:
        from PIL import Image
    except ImportError:  # pragma: no cover
        path = os.path.splitext(str(path))[0] + ".ppm"
        h, w, _ = rgb.shape
        with open(path, "wb") as fh:
            fh.write(b"P6\n%d %d\n255\n" % (w, h))
            fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())
        return path
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), "RGB").save(path, format="PNG")
    return str(path)


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres, edge-clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a 2-D array. Same-size input is returned unchanged (as a copy)."""
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape
    if (H, W) == (height, width):
        return image.copy()
    r0, r1, fr = _axis_weights(H, height)
    c0, c1, fc = _axis_weights(W, width)
    top = image[r0][:, c0] * (1 - fc) + image[r0][:, c1] * fc
    bot = image[r1][:, c0] * (1 - fc) + image[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]

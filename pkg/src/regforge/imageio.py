"""Image decoding, preprocessing and heatmap rendering.

Images are ``H x W x 3`` uint8 arrays. Binary PPM (P6) is always
supported; PNG goes through Pillow when it is installed. Grayscale output
is written as binary PGM (P5).
"""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import DecodeError

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def _read_netpbm(data: bytes, magic: bytes, channels: int) -> np.ndarray:
    pos = 2
    fields = []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if not m:
            raise DecodeError(f"truncated {magic.decode()} header")
        fields.append(m.group(1))
        pos = m.end()
    pos += 1  # single whitespace byte before the raster
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise DecodeError(f"bad {magic.decode()} header fields {fields}") from None
    if width <= 0 or height <= 0:
        raise DecodeError(f"image has zero dimension ({width}x{height})")
    if maxval != 255:
        raise DecodeError(f"only 8-bit netpbm files are supported (maxval {maxval})")
    n = width * height * channels
    raster = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos) if len(data) - pos >= n else None
    if raster is None:
        raise DecodeError("netpbm raster shorter than header promises")
    shape = (height, width, channels) if channels > 1 else (height, width)
    return raster.reshape(shape).copy()


def read_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] == b"P6":
        return _read_netpbm(data, b"P6", 3)
    if data[:2] == b"P5":
        gray = _read_netpbm(data, b"P5", 1)
        return np.repeat(gray[:, :, None], 3, axis=2)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            from PIL import Image as PILImage
        except ImportError:
            raise DecodeError("PNG input needs Pillow installed") from None
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        if arr.size == 0:
            raise DecodeError("image has zero dimension")
        return arr
    raise DecodeError(f"{path}: unrecognised image format")


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(img).tobytes())


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise DecodeError(f"{path}: not a binary PGM")
    return _read_netpbm(data, b"P5", 1)


# --------------------------------------------------------------------------
# preprocessing


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize without antialiasing; returns float64."""
    src = np.asarray(img, dtype=np.float64)
    in_h, in_w = src.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return src.copy()

    def coords(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(in_h, out_h)
    x0, x1, fx = coords(in_w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    if src.ndim == 2:
        src = src[:, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return out if np.ndim(img) == 3 else out[:, :, 0]


def resize_and_crop(img: np.ndarray, size: int) -> np.ndarray:
    """Shorter side to ``size`` (bilinear), then centre crop to a square."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DecodeError(f"cannot preprocess image of shape {arr.shape}")
    h, w = arr.shape[:2]
    if h <= w:
        new_h, new_w = size, max(size, round(w * size / h))
    else:
        new_h, new_w = max(size, round(h * size / w)), size
    out = resize_bilinear(arr, new_h, new_w)
    top = (new_h - size) // 2
    left = (new_w - size) // 2
    return out[top:top + size, left:left + size]


def normalize(img: np.ndarray, config) -> np.ndarray:
    mean = np.asarray(config.preprocess_mean, dtype=np.float64)
    std = np.asarray(config.preprocess_std, dtype=np.float64)
    return ((np.asarray(img, dtype=np.float64) / 255.0 - mean) / std).astype(np.float32)


def preprocess(img: np.ndarray, config) -> np.ndarray:
    return normalize(resize_and_crop(img, config.image_size), config)


# --------------------------------------------------------------------------
# heatmaps


def render_heatmap(grid, scale: str = "linear") -> np.ndarray:
    """Min-max a grid into uint8 grayscale. A constant grid renders as 128."""
    g = np.asarray(grid, dtype=np.float64)
    if not np.isfinite(g).all():
        raise ValueError("heatmap grid must be finite")
    if scale == "log":
        g = np.log1p(g - g.min())
    elif scale != "linear":
        raise ValueError(f"unknown heatmap scale {scale!r}")
    lo, hi = g.min(), g.max()
    if hi == lo:
        return np.full(g.shape, 128, dtype=np.uint8)
    return np.floor((g - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)


def upsample_nearest(gray: np.ndarray, height: int, width: int) -> np.ndarray:
    gh, gw = gray.shape
    rows = np.arange(height) * gh // height
    cols = np.arange(width) * gw // width
    return gray[rows][:, cols]


def overlay(img: np.ndarray, grid, alpha: float = 0.5, scale: str = "linear") -> np.ndarray:
    """Blend a red-to-blue heat layer over an RGB image."""
    img = np.asarray(img, dtype=np.float64)
    heat = upsample_nearest(render_heatmap(grid, scale), img.shape[0], img.shape[1]).astype(np.float64)
    layer = np.stack([heat, np.zeros_like(heat), 255.0 - heat], axis=-1)
    return np.clip((1 - alpha) * img + alpha * layer + 0.5, 0, 255).astype(np.uint8)

"""Bilinear resampling primitives shared by augmentation, rendering and the CLI.

All functions take H x W x 3 float arrays in [0, 1] and are pure; sampling
outside the frame replicates the border pixel.
"""
from __future__ import annotations

import numpy as np


def bilinear_sample(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample `image` at fractional (y, x) positions with border replication."""
    h, w = image.shape[:2]
    ys = np.clip(ys, 0.0, float(h - 1))
    xs = np.clip(xs, 0.0, float(w - 1))
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[..., None]
    wx = (xs - x0)[..., None]
    top = image[y0, x0] * (1.0 - wx) + image[y0, x1] * wx
    bot = image[y1, x0] * (1.0 - wx) + image[y1, x1] * wx
    out = top * (1.0 - wy) + bot * wy
    return out.astype(image.dtype, copy=False)


def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize to (height, width). Identity sizes reproduce the input exactly."""
    h_out, w_out = int(size[0]), int(size[1])
    if h_out < 1 or w_out < 1:
        raise ValueError(f"invalid target size {size}")
    h_in, w_in = image.shape[:2]
    if (h_out, w_out) == (h_in, w_in):
        return image.copy()
    ys = np.linspace(0.0, h_in - 1.0, h_out) if h_out > 1 else np.array([(h_in - 1) / 2.0])
    xs = np.linspace(0.0, w_in - 1.0, w_out) if w_out > 1 else np.array([(w_in - 1) / 2.0])
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(image, grid_y, grid_x)


def rotate_image(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image center; out-of-frame samples replicate the border."""
    if degrees == 0.0:
        return image.copy()
    h, w = image.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(degrees)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy, xx - cx
    # inverse mapping: output pixel pulls from the source rotated by -theta
    src_y = cy + dy * cos_t - dx * sin_t
    src_x = cx + dy * sin_t + dx * cos_t
    return bilinear_sample(image, src_y, src_x)


def warp_displacement(image: np.ndarray, dy: np.ndarray, dx: np.ndarray) -> np.ndarray:
    """Warp by a per-pixel displacement field (in pixels)."""
    h, w = image.shape[:2]
    if dy.shape != (h, w) or dx.shape != (h, w):
        raise ValueError("displacement fields must match the image grid")
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return bilinear_sample(image, yy + dy, xx + dx)


def make_grid(images: list[np.ndarray], pad: int = 2, pad_value: float = 1.0) -> np.ndarray:
    """Tile same-sized images horizontally with a separator, for previews."""
    if not images:
        raise ValueError("no images to tile")
    h, w = images[0].shape[:2]
    for img in images:
        if img.shape != images[0].shape:
            raise ValueError("all tiles must share one shape")
    sep = np.full((h, pad, 3), pad_value, dtype=images[0].dtype)
    parts: list[np.ndarray] = []
    for i, img in enumerate(images):
        if i:
            parts.append(sep)
        parts.append(img)
    return np.concatenate(parts, axis=1)

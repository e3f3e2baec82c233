"""Vectorized bilinear image resampling primitives (single-channel 2-D)."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import InputError


@lru_cache(maxsize=16)
def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    return np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                       indexing="ij")


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize with pixel-center alignment: src = (dst + 0.5) * scale - 0.5.

    Sampling coordinates are clamped to the source grid, so resizing an image
    to its own size is the identity.
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise InputError(f"expected a 2-D image, got shape {image.shape}")
    h, w = image.shape
    if out_h < 1 or out_w < 1:
        raise InputError("output size must be positive")
    if (out_h, out_w) == (h, w):
        return image.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    return _sample_bilinear(image, ys[:, None], xs[None, :])


def affine_warp(
    image: np.ndarray,
    rotation_deg: float = 0.0,
    scale: float = 1.0,
    tx: float = 0.0,
    ty: float = 0.0,
) -> np.ndarray:
    """Rotate/scale about the image center and translate, bilinear resampled.

    Uses inverse mapping with clamp-to-edge sampling; `tx`/`ty` are output
    translations in pixels (positive moves content right/down).
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise InputError(f"expected a 2-D image, got shape {image.shape}")
    if scale <= 0:
        raise InputError("scale must be positive")
    h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(rotation_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    yy, xx = _grid(h, w)
    # inverse map: undo translation, then inverse rotate/scale about center
    dx = (xx - cx - tx) / scale
    dy = (yy - cy - ty) / scale
    src_x = cos_t * dx + sin_t * dy + cx
    src_y = -sin_t * dx + cos_t * dy + cy
    return _sample_bilinear(image, src_y, src_x)


def _sample_bilinear(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = image.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ys - y0
    fx = xs - x0
    img = image.astype(np.float64, copy=False)
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    out = top * (1.0 - fy) + bot * fy
    if image.dtype.kind == "f":
        return out.astype(image.dtype)
    return out


def center_crop_square(image: np.ndarray) -> np.ndarray:
    """Crop the centered largest square region."""
    image = np.asarray(image)
    h, w = image.shape
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    return image[top : top + side, left : left + side]


def extrapolate_pad(image: np.ndarray, pad: int) -> np.ndarray:
    """Pad by first-order extrapolation of the border gradient.

    Keeps smooth content smooth across the border, which makes small warp
    round trips nearly lossless at the corners (clamp-to-edge flattens the
    local gradient there).  The slope is averaged over a 4-pixel window so
    per-pixel noise does not get amplified into the padding.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if pad < 1:
        return image.copy()

    def slope(edge, inner, depth):
        if depth < 2:
            return np.zeros_like(edge)
        # cap the slope so structural edges at the border cannot streak
        return np.clip((edge - inner) / (depth - 1), -0.02, 0.02)

    out = np.empty((h + 2 * pad, w + 2 * pad), dtype=np.float64)
    out[pad : pad + h, pad : pad + w] = image
    steps = np.arange(1, pad + 1)
    core = out[pad : pad + h]
    d = min(4, w)
    g_left = slope(image[:, [0]], image[:, [d - 1]], d)
    g_right = slope(image[:, [-1]], image[:, [-d]], d)
    core[:, pad - steps] = image[:, [0]] + g_left * steps
    core[:, pad + w - 1 + steps] = image[:, [-1]] + g_right * steps
    d = min(4, h)
    g_top = slope(out[pad], out[pad + d - 1], d)
    g_bot = slope(out[pad + h - 1], out[pad + h - d], d)
    for s in steps:
        out[pad - s] = out[pad] + g_top * s
        out[pad + h - 1 + s] = out[pad + h - 1] + g_bot * s
    return out

"""Plain-numpy image helpers: bilinear resize and box cropping.

All images are float arrays of shape (H, W, 3) with values in [0, 1].
"""
from __future__ import annotations

import numpy as np


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize with bilinear interpolation using half-pixel sample centers.

    Output sample (i, j) reads the source at ((i+0.5)*H/out_h - 0.5,
    (j+0.5)*W/out_w - 0.5); coordinates are clamped to the image border.
    """
    if image.ndim != 3:
        raise ValueError(f"expected (H, W, C) image, got shape {image.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    h, w = image.shape[:2]

    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)

    y0 = np.clip(np.floor(ys).astype(int), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]

    img = image.astype(np.float64)
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    return out.astype(image.dtype)


def crop_box(image: np.ndarray, box, min_size: int = 2) -> np.ndarray:
    """Crop a (x1, y1, x2, y2) box, rounding to integer pixel bounds.

    Raises ValueError when the rounded crop is narrower than min_size in
    either dimension (degenerate boxes cannot be resized meaningfully).
    """
    h, w = image.shape[:2]
    x1, y1, x2, y2 = box
    ix1 = int(np.clip(np.floor(x1), 0, w))
    iy1 = int(np.clip(np.floor(y1), 0, h))
    ix2 = int(np.clip(np.ceil(x2), 0, w))
    iy2 = int(np.clip(np.ceil(y2), 0, h))
    if ix2 - ix1 < min_size or iy2 - iy1 < min_size:
        raise ValueError(f"degenerate crop box {box!r}: needs >= {min_size} px per side")
    return image[iy1:iy2, ix1:ix2]

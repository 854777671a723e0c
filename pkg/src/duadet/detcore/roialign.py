"""Differentiable ROI pooling with bilinear sampling.

One sample per output bin, taken at the bin center after the half-pixel
alignment shift (feature coordinate = image coordinate * scale - 0.5).
Sample points are clamped to the feature border, so pooling any box from a
constant map returns that constant exactly, and pooling a full HxW box from
an HxW map at output size HxW is the identity.
"""
from __future__ import annotations

import numpy as np
import torch


def _bilinear_sample(feat: torch.Tensor, ys: torch.Tensor, xs: torch.Tensor) -> torch.Tensor:
    """Sample feat (C, H, W) at float grid points; returns (C, *points.shape)."""
    _, h, w = feat.shape
    ys = ys.clamp(0.0, h - 1.0)
    xs = xs.clamp(0.0, w - 1.0)
    y0 = ys.floor().clamp(max=h - 1)
    x0 = xs.floor().clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)
    wy = ys - y0
    wx = xs - x0
    y0l, y1l, x0l, x1l = (t.long() for t in (y0, y1, x0, x1))
    v00 = feat[:, y0l, x0l]
    v01 = feat[:, y0l, x1l]
    v10 = feat[:, y1l, x0l]
    v11 = feat[:, y1l, x1l]
    top = v00 * (1 - wx) + v01 * wx
    bot = v10 * (1 - wx) + v11 * wx
    return top * (1 - wy) + bot * wy


def roi_align(
    feat: torch.Tensor,
    boxes: np.ndarray,
    output_size: int,
    spatial_scale: float = 1.0,
) -> torch.Tensor:
    """Pool each box from feat (C, H, W) to (N, C, output_size, output_size).

    Boxes are (x1, y1, x2, y2) in image coordinates; gradients flow into
    feat only.
    """
    if feat.dim() != 3:
        raise ValueError("feat must be (C, H, W)")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = len(boxes)
    c = feat.shape[0]
    p = output_size
    if n == 0:
        return feat.new_zeros((0, c, p, p))
    offsets = (torch.arange(p, dtype=feat.dtype) + 0.5) / p
    bx = torch.from_numpy(boxes).to(feat.dtype)
    fx1 = bx[:, 0] * spatial_scale - 0.5
    fy1 = bx[:, 1] * spatial_scale - 0.5
    bw = (bx[:, 2] - bx[:, 0]) * spatial_scale
    bh = (bx[:, 3] - bx[:, 1]) * spatial_scale
    xs = fx1[:, None] + offsets[None, :] * bw[:, None]
    ys = fy1[:, None] + offsets[None, :] * bh[:, None]
    grid_y = ys[:, :, None].expand(n, p, p).reshape(-1)
    grid_x = xs[:, None, :].expand(n, p, p).reshape(-1)
    sampled = _bilinear_sample(feat, grid_y, grid_x)
    return sampled.reshape(c, n, p, p).permute(1, 0, 2, 3)

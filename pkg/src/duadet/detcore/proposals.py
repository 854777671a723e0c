"""Proposal sources: jittered ground truth for training, a small RPN for inference."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .geometry import clip_boxes, decode_boxes, encode_boxes, iou_matrix, nms


def gt_jitter_proposals(
    gt_boxes: np.ndarray,
    image_hw: tuple[int, int],
    rng: np.random.Generator,
    levels: tuple[float, ...] = (0.0, 0.08, 0.2, 0.35),
    n_random: int = 8,
    min_size: float = 4.0,
) -> np.ndarray:
    """Training proposals: one perturbed copy of every gt box per jitter level
    plus random negatives.

    Level 0 reproduces the gt box exactly; level L shifts the center and
    rescales each side by up to +-L of the box size, so the levels span a
    range of overlap qualities.  Output holds len(levels) * len(gt_boxes)
    + n_random boxes (minus any that degenerate after clipping).
    """
    h, w = image_hw
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    out = []
    for x1, y1, x2, y2 in gt_boxes:
        bw, bh = x2 - x1, y2 - y1
        for lev in levels:
            if lev == 0.0:
                out.append([x1, y1, x2, y2])
                continue
            dx = rng.uniform(-lev, lev) * bw
            dy = rng.uniform(-lev, lev) * bh
            sw = bw * (1.0 + rng.uniform(-lev, lev))
            sh = bh * (1.0 + rng.uniform(-lev, lev))
            cx, cy = (x1 + x2) / 2 + dx, (y1 + y2) / 2 + dy
            out.append([cx - sw / 2, cy - sh / 2, cx + sw / 2, cy + sh / 2])
    proposals = np.asarray(out, dtype=np.float64).reshape(-1, 4)
    negatives = random_proposals(image_hw, rng, n_random, min_size=min_size)
    boxes = clip_boxes(np.concatenate([proposals, negatives], axis=0), h, w)
    good = (boxes[:, 2] - boxes[:, 0] >= min_size) & (boxes[:, 3] - boxes[:, 1] >= min_size)
    return boxes[good]


def random_proposals(
    image_hw: tuple[int, int],
    rng: np.random.Generator,
    count: int,
    min_size: float = 4.0,
) -> np.ndarray:
    """Seeded random boxes; the proposal source for unlabeled images."""
    h, w = image_hw
    boxes = []
    for _ in range(count):
        bw = rng.uniform(min_size, 0.6 * w)
        bh = rng.uniform(min_size, 0.6 * h)
        x1 = rng.uniform(0.0, w - bw)
        y1 = rng.uniform(0.0, h - bh)
        boxes.append([x1, y1, x1 + bw, y1 + bh])
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


class RpnHead(nn.Module):
    """One square anchor per feature cell: objectness logit + 4 deltas."""

    def __init__(self, in_channels: int = 64, mid_channels: int = 64):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, mid_channels, 3, padding=1)
        self.obj = nn.Conv2d(mid_channels, 1, 1)
        self.reg = nn.Conv2d(mid_channels, 4, 1)

    def forward(self, feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """feat (C, h, w) -> objectness (h*w,), deltas (h*w, 4)."""
        mid = torch.relu(self.conv(feat[None]))
        obj = self.obj(mid)[0, 0].reshape(-1)
        reg = self.reg(mid)[0].permute(1, 2, 0).reshape(-1, 4)
        return obj, reg


def anchor_grid(feat_hw: tuple[int, int], stride: int, anchor_size: float) -> np.ndarray:
    """Square anchors centered on feature-cell centers, (h*w, 4)."""
    h, w = feat_hw
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cx = (xs + 0.5) * stride
    cy = (ys + 0.5) * stride
    half = anchor_size / 2.0
    return np.stack([cx - half, cy - half, cx + half, cy + half], axis=-1).reshape(-1, 4)


def rpn_targets(
    anchors: np.ndarray,
    gt_boxes: np.ndarray,
    pos_iou: float = 0.5,
    neg_iou: float = 0.3,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor objectness target (1 pos, 0 neg, -1 ignore) and reg deltas.

    The best-overlapping anchor of every gt box is always positive.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = len(anchors)
    labels = np.zeros(n, dtype=np.int64)
    deltas = np.zeros((n, 4), dtype=np.float64)
    if len(gt_boxes) == 0:
        return labels, deltas
    ious = iou_matrix(anchors, gt_boxes)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels[:] = -1
    labels[best_iou < neg_iou] = 0
    labels[best_iou >= pos_iou] = 1
    labels[ious.argmax(axis=0)] = 1  # anchor closest to each gt
    pos = labels == 1
    if pos.any():
        deltas[pos] = encode_boxes(anchors[pos], gt_boxes[best_gt[pos]])
    return labels, deltas


def rpn_loss(
    obj_logits: torch.Tensor,
    reg_preds: torch.Tensor,
    labels: np.ndarray,
    reg_targets: np.ndarray,
) -> torch.Tensor:
    """Objectness BCE (positive/negative halves weighted equally, so the few
    positive anchors are not drowned out) plus smooth-L1 on positives."""
    labels_t = torch.from_numpy(np.asarray(labels))
    pos = labels_t == 1
    neg = labels_t == 0
    loss = obj_logits.new_zeros(())
    for mask in (pos, neg):
        if mask.any():
            loss = loss + 0.5 * F.binary_cross_entropy_with_logits(
                obj_logits[mask], labels_t[mask].to(obj_logits.dtype)
            )
    if pos.any():
        targets = torch.from_numpy(np.asarray(reg_targets))[pos].to(reg_preds.dtype)
        loss = loss + F.smooth_l1_loss(reg_preds[pos], targets)
    return loss


def learned_propose(
    rpn: RpnHead,
    feat: torch.Tensor,
    image_hw: tuple[int, int],
    stride: int,
    anchor_size: float,
    pre_nms: int = 32,
    post_nms: int = 12,
    nms_iou: float = 0.7,
    min_size: float = 4.0,
) -> np.ndarray:
    """Decode top-scoring anchors into clipped, NMS-filtered proposals."""
    with torch.no_grad():
        obj, reg = rpn(feat)
    anchors = anchor_grid(feat.shape[-2:], stride, anchor_size)
    scores = obj.double().numpy()
    order = np.argsort(-scores, kind="stable")[:pre_nms]
    boxes = clip_boxes(decode_boxes(anchors[order], reg.double().numpy()[order]), *image_hw)
    good = (boxes[:, 2] - boxes[:, 0] >= min_size) & (boxes[:, 3] - boxes[:, 1] >= min_size)
    boxes, kept_scores = boxes[good], scores[order][good]
    if len(boxes) == 0:
        return boxes
    keep = nms(boxes, kept_scores, nms_iou)[:post_nms]
    return boxes[keep]

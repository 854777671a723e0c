"""Proposal-to-gt matching and the supervised detection loss."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import encode_boxes, iou_matrix


def match_proposals(
    proposals: np.ndarray,
    gt_boxes: np.ndarray,
    gt_labels: np.ndarray,
    num_classes: int,
    fg_iou: float = 0.5,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Assign each proposal a class target and, for foreground, reg deltas.

    A proposal is foreground when its best gt IoU reaches fg_iou; otherwise
    it is background (class index num_classes).  Returns (labels, deltas,
    fg_mask); deltas are zero rows for background.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    n = len(proposals)
    labels = np.full(n, num_classes, dtype=np.int64)
    deltas = np.zeros((n, 4), dtype=np.float64)
    if n == 0 or len(gt_boxes) == 0:
        return labels, deltas, labels != num_classes
    ious = iou_matrix(proposals, gt_boxes)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    fg = best_iou >= fg_iou
    labels[fg] = gt_labels[best_gt[fg]]
    if fg.any():
        deltas[fg] = encode_boxes(proposals[fg], gt_boxes[best_gt[fg]])
    return labels, deltas, fg


def detection_loss(
    cls_logits: torch.Tensor,
    reg_preds: torch.Tensor,
    labels: np.ndarray,
    reg_targets: np.ndarray,
    fg_mask: np.ndarray,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Cross-entropy over all proposals plus smooth-L1 on foreground boxes.

    reg_preds holds 4 deltas per foreground class; only the slice of the
    matched class enters the regression term.
    """
    labels_t = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    if cls_logits.shape[0] == 0:
        zero = cls_logits.new_zeros(())
        return zero, {"cls": 0.0, "reg": 0.0}
    loss_cls = F.cross_entropy(cls_logits, labels_t)
    fg_idx = np.flatnonzero(fg_mask)
    if len(fg_idx) > 0:
        rows = torch.from_numpy(fg_idx)
        cols = labels_t[rows]
        picked = torch.stack(
            [reg_preds[r, 4 * c : 4 * c + 4] for r, c in zip(rows.tolist(), cols.tolist())]
        )
        targets = torch.from_numpy(np.asarray(reg_targets))[rows].to(reg_preds.dtype)
        loss_reg = F.smooth_l1_loss(picked, targets)
    else:
        loss_reg = cls_logits.new_zeros(())
    total = loss_cls + loss_reg
    return total, {"cls": float(loss_cls.detach()), "reg": float(loss_reg.detach())}

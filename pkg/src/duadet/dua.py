"""Distillation-guided detector training.

The stage-two trainer optimizes the adversarial-alignment objective and,
when distillation is on, adds two terms computed on well-localized source
proposals: an L1 pull between the frozen teacher's logits and the student's
projected logits, and an auxiliary cross-entropy on those student logits.
The student path is Q = classify(project(F(r))): a 1x1-conv channel
projection (identity at init) feeding the detector's own classification
branch, so distillation gradients reach the backbone, the projection, and
the shared classification head.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .align import InstanceDomainDiscriminator, ImageDomainDiscriminator, adversarial_loss, da_objective
from .detcore.geometry import iou_matrix
from .detcore.losses import detection_loss, match_proposals
from .detcore.model import Detector, RoiHead
from .detcore.proposals import anchor_grid, gt_jitter_proposals, random_proposals, rpn_loss, rpn_targets
from .imageops import bilinear_resize, crop_box
from .teacher_cls import ClassifierTeacher, teacher_logits
from .utils import rng_for


def select_distill_proposals(
    proposals: np.ndarray,
    gt_boxes: np.ndarray,
    gt_labels: np.ndarray,
    iou_thresh: float = 0.8,
) -> tuple[np.ndarray, np.ndarray]:
    """Indices of proposals overlapping some gt at IoU >= iou_thresh.

    Each selected proposal takes the class label of its best-overlapping gt
    box (ties resolved toward the lower gt index).  Returns (indices,
    labels); both empty when nothing qualifies.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    if len(proposals) == 0 or len(gt_boxes) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    ious = iou_matrix(proposals, gt_boxes)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(len(proposals)), best_gt]
    sel = np.flatnonzero(best_iou >= iou_thresh)
    return sel, gt_labels[best_gt[sel]]


def crop_and_query_teacher(
    image: np.ndarray, boxes: np.ndarray, teacher: ClassifierTeacher
) -> np.ndarray:
    """Frozen-teacher logits for image crops at the given boxes, (N, K).

    Crops are cut from the image and bilinearly resized to the teacher's
    input size.  Degenerate boxes raise.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0:
        return np.zeros((0, teacher.num_classes), dtype=np.float64)
    size = teacher.input_size
    crops = [bilinear_resize(crop_box(image, box), size, size) for box in boxes]
    return teacher_logits(teacher, crops)


class LogitProjector(nn.Module):
    """1x1 conv over instance-feature channels, initialized to the identity."""

    def __init__(self, channels: int = 64):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 1)
        with torch.no_grad():
            self.conv.weight.copy_(torch.eye(channels).reshape(channels, channels, 1, 1))
            self.conv.bias.zero_()

    def forward(self, roi_feats: torch.Tensor) -> torch.Tensor:
        return self.conv(roi_feats)


def project_logits(
    roi_feats: torch.Tensor, projector: LogitProjector, roi_head: RoiHead
) -> torch.Tensor:
    """Student logits Q over foreground classes, (N, K).

    The classification branch is the detector's own head (shared
    parameters); only its foreground columns are kept, matching the
    teacher's class set.
    """
    logits = roi_head.classify(projector(roi_feats))
    return logits[:, : roi_head.num_classes]


def distill_loss(teacher_out: torch.Tensor, student_out: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all proposals and classes; 0 when empty."""
    if teacher_out.shape != student_out.shape:
        raise ValueError("teacher/student logit shapes differ")
    if student_out.numel() == 0:
        return student_out.new_zeros(())
    return (teacher_out - student_out).abs().mean()


def aux_cls_loss(student_out: torch.Tensor, labels: np.ndarray) -> torch.Tensor:
    """Cross-entropy between gt labels and softmaxed student logits; 0 when empty."""
    if student_out.shape[0] == 0:
        return student_out.new_zeros(())
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    k = student_out.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    return F.cross_entropy(student_out, torch.from_numpy(labels))


def total_objective(
    l_da: torch.Tensor,
    l_dist: torch.Tensor,
    l_cls_aux: torch.Tensor,
    lambda1: float = 1.0,
    lambda2: float = 1.0,
) -> torch.Tensor:
    """Alignment objective plus weighted distillation terms."""
    return l_da + lambda1 * l_dist + lambda2 * l_cls_aux


@dataclass
class TrainSettings:
    steps: int = 2000
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lambda_adv: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    grl_lambda: float = 1.0
    distill_iou: float = 0.8
    use_dua: bool = False
    target_proposals: int = 8


class DuaTrainer:
    """Stage-two training loop over paired (source, target) scenes.

    With use_dua=False this is the plain adversarial-alignment baseline;
    with use_dua=True the distillation terms join the objective.  All
    randomness comes from the seed, so a rerun reproduces the loss
    trajectory bit for bit.
    """

    def __init__(
        self,
        detector: Detector,
        settings: TrainSettings,
        seed: int,
        teacher: ClassifierTeacher | None = None,
    ):
        if settings.use_dua and teacher is None:
            raise ValueError("distillation needs a trained teacher")
        if teacher is not None and not teacher.is_frozen:
            raise ValueError("teacher must be frozen")
        self.detector = detector
        self.settings = settings
        self.teacher = teacher
        self.seed = seed
        cfg = detector.cfg
        self.img_disc = ImageDomainDiscriminator(cfg.channels)
        self.inst_disc = InstanceDomainDiscriminator(cfg.channels, cfg.pool_size)
        self.projector = LogitProjector(cfg.channels) if settings.use_dua else None
        params = (
            list(detector.parameters())
            + list(self.img_disc.parameters())
            + list(self.inst_disc.parameters())
            + (list(self.projector.parameters()) if self.projector is not None else [])
        )
        self.optim = torch.optim.SGD(
            params, lr=settings.lr, momentum=settings.momentum, weight_decay=settings.weight_decay
        )
        self.rng = rng_for(seed, "detector-train")
        self.step_count = 0

    def _source_losses(self, scene):
        det = self.detector
        feat = det.features(scene.image)
        h, w = scene.image.shape[:2]
        proposals = gt_jitter_proposals(scene.boxes, (h, w), self.rng)
        roi_feats = det.roi_features(feat, proposals)
        cls_logits, reg_preds = det.roi_head(roi_feats)
        labels, deltas, fg = match_proposals(
            proposals, scene.boxes, scene.labels, det.cfg.num_classes
        )
        l_roi, _ = detection_loss(cls_logits, reg_preds, labels, deltas, fg)
        obj_logits, rpn_reg = det.rpn(feat)
        anchors = anchor_grid(feat.shape[-2:], det.stride, det.cfg.anchor_size)
        rpn_labels, rpn_deltas = rpn_targets(anchors, scene.boxes)
        l_rpn = rpn_loss(obj_logits, rpn_reg, rpn_labels, rpn_deltas)
        l_det = l_roi + l_rpn
        return feat, proposals, roi_feats, l_det

    def train_step(self, source_scene, target_scene) -> dict:
        s = self.settings
        det = self.detector
        feat_s, proposals_s, roi_feats_s, l_det = self._source_losses(source_scene)
        l_adv_s, stats_s = adversarial_loss(
            self.img_disc, self.inst_disc, feat_s, roi_feats_s, 0.0, s.grl_lambda
        )

        feat_t = det.features(target_scene.image)
        h, w = target_scene.image.shape[:2]
        target_boxes = random_proposals((h, w), self.rng, s.target_proposals)
        roi_feats_t = det.roi_features(feat_t, target_boxes)
        l_adv_t, stats_t = adversarial_loss(
            self.img_disc, self.inst_disc, feat_t, roi_feats_t, 1.0, s.grl_lambda
        )
        l_adv = l_adv_s + l_adv_t
        l_da = da_objective(l_det, l_adv, s.lambda_adv)

        row = {
            "step": self.step_count,
            "L_DA": float(l_da.detach()),
            "L_det": float(l_det.detach()),
            "L_adv": float(l_adv.detach()),
            "disc_acc": 0.5 * (stats_s["disc_acc"] + stats_t["disc_acc"]),
        }

        if s.use_dua:
            sel, sel_labels = select_distill_proposals(
                proposals_s, source_scene.boxes, source_scene.labels, s.distill_iou
            )
            if len(sel) > 0:
                p_logits = crop_and_query_teacher(
                    source_scene.image, proposals_s[sel], self.teacher
                )
                q_logits = project_logits(
                    roi_feats_s[torch.from_numpy(sel)], self.projector, det.roi_head
                )
                l_dist = distill_loss(
                    torch.as_tensor(p_logits, dtype=q_logits.dtype), q_logits
                )
                l_aux = aux_cls_loss(q_logits, sel_labels)
            else:
                l_dist = l_da.new_zeros(())
                l_aux = l_da.new_zeros(())
            loss = total_objective(l_da, l_dist, l_aux, s.lambda1, s.lambda2)
            row.update(
                L_dist=float(l_dist.detach()),
                L_cls_aux=float(l_aux.detach()),
                n_selected=int(len(sel)),
            )
        else:
            loss = l_da

        self.optim.zero_grad()
        loss.backward()
        self.optim.step()
        self.step_count += 1
        return row

    def train(self, source_scenes, target_scenes, log_writer=None) -> list[dict]:
        if not source_scenes or not target_scenes:
            raise ValueError("need both source and target scenes")
        history = []
        while self.step_count < self.settings.steps:
            src = source_scenes[int(self.rng.integers(len(source_scenes)))]
            tgt = target_scenes[int(self.rng.integers(len(target_scenes)))]
            row = self.train_step(src, tgt)
            history.append(row)
            if log_writer is not None:
                log_writer.write(row)
        self.detector.eval()
        return history

"""Test-time consistency refinement.

The localizer's proposals replace the detector's own, and each proposal's
classification vector is re-shaped by its localization quality: scores and
the quality scalar are multiplied, fourth-rooted, and re-normalized with a
softmax.  The transform is monotone per box, so the argmax class never
changes — only the ranking across boxes does.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .detcore.geometry import nms
from .detcore.model import Detector
from .troln import LocalizedProposal, TrolnNet, troln_infer


def localization_score(c: float, b: float, tau1: float, tau2: float) -> float:
    """Domain-aware box quality: sqrt(4 * c * b * tau1 * tau2).

    Symmetric in all four factors and zero when any factor is zero; the
    value is deliberately not clamped (downstream softmax normalizes).
    Negative inputs are rejected.
    """
    if min(c, b, tau1, tau2) < 0:
        raise ValueError("localization score factors must be nonnegative")
    return math.sqrt(4.0 * c * b * tau1 * tau2)


def refine_scores(cls: np.ndarray, s: float) -> np.ndarray:
    """Refined class vector: softmax over the fourth roots of cls * s.

    cls entries must be nonnegative (post-softmax scores); s >= 0.  With
    s = 0 every entry collapses to the uniform vector.
    """
    cls = np.asarray(cls, dtype=np.float64)
    if cls.min() < 0:
        raise ValueError("cls entries must be nonnegative")
    if s < 0:
        raise ValueError("s must be nonnegative")
    roots = np.power(cls * s, 0.25)
    shifted = roots - roots.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


@dataclass
class RefinedDetection:
    box: np.ndarray
    cls_raw: np.ndarray
    s: float
    cls_refined: np.ndarray
    proposal_id: int
    kept_by_nms: bool = False

    def to_dict(self) -> dict:
        return {
            "box": [float(v) for v in self.box],
            "cls_raw": [float(v) for v in self.cls_raw],
            "s": self.s,
            "cls_refined": [float(v) for v in self.cls_refined],
            "proposal_id": self.proposal_id,
            "kept_by_nms": self.kept_by_nms,
        }


def dce_pipeline(
    image: np.ndarray,
    detector: Detector,
    localizer: TrolnNet,
    refine: bool = True,
    nms_iou: float = 0.5,
) -> list[RefinedDetection]:
    """Proposal swap plus score refinement over one image.

    The localizer proposes boxes with quality scalars; the detector's ROI
    head classifies and regresses them (the regressed boxes are kept as-is);
    classification vectors are refined per box unless refine is False; NMS
    runs over foreground-argmax boxes ranked by their best refined
    foreground score.  Every refined detection is returned, with
    kept_by_nms marking the survivors.
    """
    proposals = troln_infer(localizer, image)
    return refine_proposals(image, detector, proposals, refine=refine, nms_iou=nms_iou)


def refine_proposals(
    image: np.ndarray,
    detector: Detector,
    proposals: list[LocalizedProposal],
    refine: bool = True,
    nms_iou: float = 0.5,
) -> list[RefinedDetection]:
    """The classification/refinement half of the pipeline, given proposals."""
    if not proposals:
        return []
    h, w = image.shape[:2]
    feat = detector.features(image)
    boxes = np.stack([p.box for p in proposals])
    outputs = detector.score_proposals(feat, boxes, (h, w))
    refined: list[RefinedDetection] = []
    for prop, out in zip(proposals, outputs):
        cls_raw = np.asarray(out["cls"], dtype=np.float64)
        s = localization_score(prop.c, prop.b, prop.tau1, prop.tau2)
        cls_refined = refine_scores(cls_raw, s) if refine else cls_raw.copy()
        refined.append(
            RefinedDetection(
                box=np.asarray(out["box"], dtype=np.float64),
                cls_raw=cls_raw,
                s=s,
                cls_refined=cls_refined,
                proposal_id=int(out["proposal_id"]),
            )
        )
    _mark_nms_survivors(refined, nms_iou)
    return refined


def _mark_nms_survivors(refined: list[RefinedDetection], nms_iou: float) -> None:
    k = len(refined[0].cls_refined) - 1 if refined else 0
    candidates = [r for r in refined if int(np.argmax(r.cls_refined)) != k]
    if not candidates:
        return
    boxes = np.stack([r.box for r in candidates])
    scores = np.asarray([float(r.cls_refined[:k].max()) for r in candidates])
    for idx in nms(boxes, scores, nms_iou):
        candidates[int(idx)].kept_by_nms = True


def refined_to_detections(refined: list[RefinedDetection]) -> list[dict]:
    """NMS survivors as {box, label, score} rows for AP evaluation."""
    out = []
    for r in refined:
        if not r.kept_by_nms:
            continue
        k = len(r.cls_refined) - 1
        fg = r.cls_refined[:k]
        out.append(
            {
                "box": [float(v) for v in r.box],
                "label": int(fg.argmax()),
                "score": float(fg.max()),
                "proposal_id": r.proposal_id,
            }
        )
    return out


def refined_to_outputs(refined: list[RefinedDetection], use_refined: bool = True) -> list[dict]:
    """Pre-NMS head-output rows (proposal_id, box, cls) for consistency sampling."""
    key = "cls_refined" if use_refined else "cls_raw"
    return [
        {
            "proposal_id": r.proposal_id,
            "box": [float(v) for v in r.box],
            "cls": [float(v) for v in getattr(r, key)],
        }
        for r in refined
    ]

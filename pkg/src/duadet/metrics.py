"""Evaluation metrics: AP50, rank correlations, source bias, consistency pairs.

The rank correlations are written in plain sequential float arithmetic so
that independent re-derivations of the same formulas agree bit for bit.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .detcore.geometry import iou_matrix
from .utils import rng_for


# ---------------------------------------------------------------------------
# average precision
# ---------------------------------------------------------------------------

def ap50(
    detections: list[dict],
    gts: list[dict],
    num_classes: int,
    iou_thresh: float = 0.5,
) -> tuple[float, dict[int, dict]]:
    """Mean AP at an IoU threshold over classes that have ground truth.

    detections: {image_id, box, label, score}; gts: {image_id, box, label}.
    Per class: detections sorted by descending score, matched greedily to
    the best-overlapping unmatched gt of the same image; the PR curve is
    integrated with all-point interpolation.  Returns (mAP, per-class data
    with ap/recall/precision arrays).
    """
    per_class: dict[int, dict] = {}
    aps = []
    for cls in range(num_classes):
        cls_gts: dict[object, list] = {}
        for gt in gts:
            if gt["label"] == cls:
                cls_gts.setdefault(gt["image_id"], []).append(np.asarray(gt["box"], dtype=np.float64))
        n_gt = sum(len(v) for v in cls_gts.values())
        if n_gt == 0:
            continue
        cls_dets = [d for d in detections if d["label"] == cls]
        cls_dets.sort(key=lambda d: -d["score"])
        matched = {img: np.zeros(len(v), dtype=bool) for img, v in cls_gts.items()}
        tp = np.zeros(len(cls_dets))
        fp = np.zeros(len(cls_dets))
        for i, det in enumerate(cls_dets):
            img = det["image_id"]
            if img not in cls_gts:
                fp[i] = 1
                continue
            ious = iou_matrix(
                np.asarray(det["box"], dtype=np.float64)[None], np.stack(cls_gts[img])
            )[0]
            best = int(ious.argmax())
            if ious[best] >= iou_thresh and not matched[img][best]:
                tp[i] = 1
                matched[img][best] = True
            else:
                fp[i] = 1
        cum_tp = np.cumsum(tp)
        cum_fp = np.cumsum(fp)
        recall = cum_tp / n_gt
        precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
        ap = _all_point_ap(recall, precision)
        aps.append(ap)
        per_class[cls] = {
            "ap": ap,
            "n_gt": n_gt,
            "recall": recall.tolist(),
            "precision": precision.tolist(),
        }
    mean_ap = float(np.mean(aps)) if aps else 0.0
    return mean_ap, per_class


def _all_point_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mpre[idx]))


# ---------------------------------------------------------------------------
# rank correlations
# ---------------------------------------------------------------------------

def midranks(values) -> list[float]:
    """1-based ranks with ties averaged; exact multiples of 0.5."""
    n = len(values)
    order = sorted(range(n), key=lambda i: values[i])
    ranks = [0.0] * n
    i = 0
    while i < n:
        j = i
        while j + 1 < n and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def _pearson(xs: list[float], ys: list[float]) -> float:
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    sxy = 0.0
    sxx = 0.0
    syy = 0.0
    for i in range(n):
        dx = xs[i] - mx
        dy = ys[i] - my
        sxy += dx * dy
        sxx += dx * dx
        syy += dy * dy
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("correlation undefined for a constant-rank variable")
    return sxy / math.sqrt(sxx * syy)


def spearman(x, y) -> float:
    """Rank correlation: Pearson correlation of mid-ranks."""
    x = [float(v) for v in x]
    y = [float(v) for v in y]
    if len(x) != len(y):
        raise ValueError("length mismatch")
    if len(x) < 2:
        raise ValueError("need at least two observations")
    return _pearson(midranks(x), midranks(y))


def kendall_tau_b(x, y) -> float:
    """Tie-corrected Kendall rank correlation.

    (concordant - discordant) / sqrt((n0 - n1)(n0 - n2)); n1 and n2 count
    tied pairs within x and y.  A fully tied variable makes the statistic
    undefined and raises ValueError.
    """
    x = [float(v) for v in x]
    y = [float(v) for v in y]
    if len(x) != len(y):
        raise ValueError("length mismatch")
    n = len(x)
    if n < 2:
        raise ValueError("need at least two observations")
    concordant = 0
    discordant = 0
    for i in range(n):
        for j in range(i + 1, n):
            dx = (x[i] > x[j]) - (x[i] < x[j])
            dy = (y[i] > y[j]) - (y[i] < y[j])
            prod = dx * dy
            if prod > 0:
                concordant += 1
            elif prod < 0:
                discordant += 1
    n0 = n * (n - 1) // 2
    n1 = sum(t * (t - 1) // 2 for t in Counter(x).values())
    n2 = sum(t * (t - 1) // 2 for t in Counter(y).values())
    denom = (n0 - n1) * (n0 - n2)
    if denom == 0:
        raise ValueError("tau-b undefined for a fully tied variable")
    return (concordant - discordant) / math.sqrt(denom)


# ---------------------------------------------------------------------------
# source bias
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BiasReport:
    ap_s: float
    ap_t: float
    theta: float

    @property
    def theta_percent(self) -> float:
        """Theta as a percentage rounded to two decimals for tables."""
        return round(100.0 * self.theta, 2)

    def to_dict(self) -> dict:
        return {"ap_s": self.ap_s, "ap_t": self.ap_t, "theta": self.theta}


def source_bias(ap_s: float, ap_t: float) -> BiasReport:
    """Relative AP gap |AP_s - AP_t| / (AP_s + AP_t), symmetric in its arguments."""
    if ap_s < 0 or ap_t < 0:
        raise ValueError("AP values must be nonnegative")
    if ap_s + ap_t == 0:
        raise ValueError("source bias undefined when both APs are zero")
    return BiasReport(ap_s=float(ap_s), ap_t=float(ap_t), theta=abs(ap_s - ap_t) / (ap_s + ap_t))


# ---------------------------------------------------------------------------
# score/localization consistency
# ---------------------------------------------------------------------------

@dataclass
class ConsistencyReport:
    pairs: list[tuple[float, float]] = field(default_factory=list)
    src: float = float("nan")
    tau_b: float = float("nan")
    n_sampled: int = 0

    def to_dict(self) -> dict:
        return {
            "pairs": [[s, g] for s, g in self.pairs],
            "src": self.src,
            "tau_b": self.tau_b,
            "n_sampled": self.n_sampled,
        }


def consistency_pairs_for_image(
    outputs: list[dict], gt_boxes: np.ndarray, match_iou: float = 0.5
) -> list[tuple[float, float]]:
    """(best foreground score, IoU to matched gt) pairs for one image.

    Background-argmax rows are excluded; rows sharing a proposal id keep
    only the highest-scoring one; rows are matched to their best-overlapping
    gt and dropped when that IoU is below match_iou.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    best_per_proposal: dict[int, tuple[float, list]] = {}
    for row in outputs:
        cls = np.asarray(row["cls"], dtype=np.float64)
        k = len(cls) - 1
        if int(cls.argmax()) == k:
            continue
        score = float(cls[:k].max())
        pid = int(row["proposal_id"])
        if pid not in best_per_proposal or score > best_per_proposal[pid][0]:
            best_per_proposal[pid] = (score, row["box"])
    pairs = []
    if len(gt_boxes) == 0:
        return pairs
    for pid in sorted(best_per_proposal):
        score, box = best_per_proposal[pid]
        ious = iou_matrix(np.asarray(box, dtype=np.float64)[None], gt_boxes)[0]
        loc = float(ious.max())
        if loc >= match_iou:
            pairs.append((score, loc))
    return pairs


def sample_consistency_pairs(
    outputs_per_image: list[list[dict]],
    gt_boxes_per_image: list[np.ndarray],
    n: int = 500,
    seed: int = 0,
    match_iou: float = 0.5,
) -> ConsistencyReport:
    """Pool per-image (score, gt-IoU) pairs, sample up to n, and correlate."""
    if len(outputs_per_image) != len(gt_boxes_per_image):
        raise ValueError("per-image lists must align")
    pool: list[tuple[float, float]] = []
    for outputs, gt_boxes in zip(outputs_per_image, gt_boxes_per_image):
        pool.extend(consistency_pairs_for_image(outputs, gt_boxes, match_iou))
    if not pool:
        return ConsistencyReport()
    rng = rng_for(seed, "consistency-sample")
    if len(pool) > n:
        idx = rng.choice(len(pool), size=n, replace=False)
        sampled = [pool[int(i)] for i in idx]
    else:
        sampled = list(pool)
    report = ConsistencyReport(pairs=sampled, n_sampled=len(sampled))
    scores = [p[0] for p in sampled]
    locs = [p[1] for p in sampled]
    try:
        report.src = spearman(scores, locs)
        report.tau_b = kendall_tau_b(scores, locs)
    except ValueError:
        pass  # degenerate sample: correlations stay NaN
    return report

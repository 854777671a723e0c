"""Target-relevant object localization network.

A class-agnostic localizer: a dense head predicts per-pixel centerness and
box offsets, an ROI head predicts the IoU of a proposal to its ground truth,
and a pixel-level domain discriminator estimates how target-like each
feature cell looks.  The discriminator's probability map provides affinity
weights (tau1 per pixel, tau2 per proposal) that scale up the localization
loss on target-looking samples; the weights are detached, so they steer the
localization heads without feeding gradients back into the discriminator.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .detcore.geometry import clip_boxes, iou_matrix, nms, encode_boxes
from .detcore.model import Backbone, image_to_tensor
from .detcore.proposals import gt_jitter_proposals
from .detcore.roialign import roi_align
from .utils import rng_for

CHECKPOINT_FORMAT_VERSION = 1
EPS = 1e-6


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------

def centerness_target(px: float, py: float, box) -> float:
    """How centered (px, py) sits inside box, in [0, 1].

    sqrt( min(l,r)/max(l,r) * min(t,b)/max(t,b) ) with l, r, t, b the
    distances to the four sides; 1 at the center, 0 on an edge.  The point
    must lie inside the box.
    """
    x1, y1, x2, y2 = (float(v) for v in box)
    l, r = px - x1, x2 - px
    t, b = py - y1, y2 - py
    if min(l, r, t, b) < 0:
        raise ValueError(f"point ({px},{py}) lies outside box {box}")
    if max(l, r) == 0 or max(t, b) == 0:
        raise ValueError(f"box {box} is degenerate")
    return float(np.sqrt((min(l, r) / max(l, r)) * (min(t, b) / max(t, b))))


def dense_targets(
    gt_boxes: np.ndarray, feat_hw: tuple[int, int], stride: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positive feature cells and their centerness / offset targets.

    A cell is positive when its center falls inside a gt box; cells inside
    several boxes are assigned to the smallest one.  Returns (cells (N,2) as
    (row, col), centerness (N,), offsets (N,4) as (l, t, r, b) / stride).
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    h, w = feat_hw
    cells, cents, offsets = [], [], []
    if len(gt_boxes) == 0:
        return (
            np.zeros((0, 2), dtype=np.int64),
            np.zeros(0, dtype=np.float64),
            np.zeros((0, 4), dtype=np.float64),
        )
    areas = (gt_boxes[:, 2] - gt_boxes[:, 0]) * (gt_boxes[:, 3] - gt_boxes[:, 1])
    for row in range(h):
        for col in range(w):
            px = (col + 0.5) * stride
            py = (row + 0.5) * stride
            inside = np.flatnonzero(
                (gt_boxes[:, 0] <= px)
                & (px <= gt_boxes[:, 2])
                & (gt_boxes[:, 1] <= py)
                & (py <= gt_boxes[:, 3])
            )
            if len(inside) == 0:
                continue
            gi = inside[np.argmin(areas[inside])]
            x1, y1, x2, y2 = gt_boxes[gi]
            cells.append((row, col))
            cents.append(centerness_target(px, py, gt_boxes[gi]))
            offsets.append(((px - x1) / stride, (py - y1) / stride, (x2 - px) / stride, (y2 - py) / stride))
    return (
        np.asarray(cells, dtype=np.int64).reshape(-1, 2),
        np.asarray(cents, dtype=np.float64),
        np.asarray(offsets, dtype=np.float64).reshape(-1, 4),
    )


def proposal_iou_targets(
    proposals: np.ndarray, gt_boxes: np.ndarray, pos_iou: float = 0.3
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positive proposals (max gt IoU >= pos_iou), their IoU and reg targets."""
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(proposals) == 0 or len(gt_boxes) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros((0, 4))
    ious = iou_matrix(proposals, gt_boxes)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(len(proposals)), best_gt]
    pos = np.flatnonzero(best_iou >= pos_iou)
    if len(pos) == 0:
        return pos, np.zeros(0), np.zeros((0, 4))
    deltas = encode_boxes(proposals[pos], gt_boxes[best_gt[pos]])
    return pos, best_iou[pos], deltas


# ---------------------------------------------------------------------------
# affinity map
# ---------------------------------------------------------------------------

def discriminator_loss(affinity: torch.Tensor, domain_label: float) -> torch.Tensor:
    """Mean binary cross-entropy of the probability map against the label.

    Probabilities are clamped to [1e-6, 1 - 1e-6] before the logs.
    """
    m = affinity.clamp(EPS, 1.0 - EPS)
    d = float(domain_label)
    return (-d * torch.log(m) - (1.0 - d) * torch.log(1.0 - m)).mean()


def affinity_pool(affinity: np.ndarray, feat_box, pooled_size: int = 7) -> float:
    """Mean of an ROI pooling of the affinity map over a feature-space box.

    Samples the map at the pooled-bin centers using the nearest cell, so a
    one-cell box returns exactly that cell's value and a constant map
    returns the constant.
    """
    m = np.asarray(affinity, dtype=np.float64)
    h, w = m.shape
    fx1, fy1, fx2, fy2 = (float(v) for v in feat_box)
    bw, bh = fx2 - fx1, fy2 - fy1
    if bw <= EPS or bh <= EPS:
        col = int(np.clip(round((fx1 + fx2) / 2.0 - 0.5), 0, w - 1))
        row = int(np.clip(round((fy1 + fy2) / 2.0 - 0.5), 0, h - 1))
        return float(m[row, col])
    offsets = (np.arange(pooled_size) + 0.5) / pooled_size
    xs = (fx1 - 0.5) + offsets * bw
    ys = (fy1 - 0.5) + offsets * bh
    cols = np.clip(np.round(xs), 0, w - 1).astype(np.int64)
    rows = np.clip(np.round(ys), 0, h - 1).astype(np.int64)
    return float(m[np.ix_(rows, cols)].mean())


def affinity_weights(
    affinity: np.ndarray,
    cell: tuple[int, int],
    proposal_box,
    stride: int,
    pooled_size: int = 7,
) -> tuple[float, float]:
    """(tau1, tau2) for a pixel and a proposal, both from the affinity map.

    tau1 is the map value at the feature cell; tau2 is the mean ROI pooling
    of the map over the proposal mapped into feature coordinates.
    """
    m = np.asarray(affinity, dtype=np.float64)
    row, col = cell
    if not (0 <= row < m.shape[0] and 0 <= col < m.shape[1]):
        raise ValueError(f"cell {cell} outside affinity map {m.shape}")
    tau1 = float(m[row, col])
    feat_box = [float(v) / stride for v in proposal_box]
    tau2 = affinity_pool(m, feat_box, pooled_size)
    return tau1, tau2


def cell_for_point(px: float, py: float, feat_hw: tuple[int, int], stride: int) -> tuple[int, int]:
    """Feature cell containing an image point, clamped to the grid."""
    h, w = feat_hw
    col = int(np.clip(px / stride, 0, w - 1))
    row = int(np.clip(py / stride, 0, h - 1))
    return row, col


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def weighted_l1_loss(pred: torch.Tensor, target: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
    """Mean of (tau + 1) * |pred - target|; tau acts as a constant weight."""
    if pred.numel() == 0:
        return pred.new_zeros(())
    return ((tau.detach() + 1.0) * (pred - target).abs()).mean()


def plain_l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.numel() == 0:
        return pred.new_zeros(())
    return (pred - target).abs().mean()


def troln_loss(
    cent_pred: torch.Tensor,
    cent_target: torch.Tensor,
    tau1: torch.Tensor,
    rpn_reg_pred: torch.Tensor,
    rpn_reg_target: torch.Tensor,
    iou_pred: torch.Tensor,
    iou_target: torch.Tensor,
    tau2: torch.Tensor,
    rcnn_reg_pred: torch.Tensor,
    rcnn_reg_target: torch.Tensor,
    l_dis: torch.Tensor,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Affinity-weighted localization loss plus the discriminator term.

    total = mean (tau1+1)|cent err| + mean |rpn reg err|
          + mean (tau2+1)|iou err|  + mean |rcnn reg err| + l_dis
    Empty positive sets contribute zero.  The localization part (everything
    except l_dis) is returned under parts["loc"].
    """
    cent = weighted_l1_loss(cent_pred, cent_target, tau1)
    rpn_reg = plain_l1_loss(rpn_reg_pred, rpn_reg_target)
    iou = weighted_l1_loss(iou_pred, iou_target, tau2)
    rcnn_reg = plain_l1_loss(rcnn_reg_pred, rcnn_reg_target)
    loc = cent + rpn_reg + iou + rcnn_reg
    total = loc + l_dis
    parts = {
        "cent": float(cent.detach()),
        "rpn_reg": float(rpn_reg.detach()),
        "iou": float(iou.detach()),
        "rcnn_reg": float(rcnn_reg.detach()),
        "dis": float(l_dis.detach()),
        "loc": float(loc.detach()),
    }
    return total, parts


def oln_loss(
    cent_pred: torch.Tensor,
    cent_target: torch.Tensor,
    rpn_reg_pred: torch.Tensor,
    rpn_reg_target: torch.Tensor,
    iou_pred: torch.Tensor,
    iou_target: torch.Tensor,
    rcnn_reg_pred: torch.Tensor,
    rcnn_reg_target: torch.Tensor,
) -> torch.Tensor:
    """Unweighted counterpart of the localization part of troln_loss."""
    cent = plain_l1_loss(cent_pred, cent_target)
    rpn_reg = plain_l1_loss(rpn_reg_pred, rpn_reg_target)
    iou = plain_l1_loss(iou_pred, iou_target)
    rcnn_reg = plain_l1_loss(rcnn_reg_pred, rcnn_reg_target)
    return cent + rpn_reg + iou + rcnn_reg


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrolnConfig:
    channels: int = 64
    pool_size: int = 7
    hidden: int = 128
    pos_iou: float = 0.3
    pre_nms: int = 32
    post_nms: int = 12
    nms_iou: float = 0.7
    min_box_size: float = 4.0


class TrolnNet(nn.Module):
    def __init__(self, cfg: TrolnConfig | None = None):
        super().__init__()
        self.cfg = cfg or TrolnConfig()
        c = self.cfg.channels
        self.backbone = Backbone(c)
        self.dense = nn.Sequential(nn.Conv2d(c, 64, 3, padding=1), nn.ReLU(inplace=True))
        self.cent_head = nn.Conv2d(64, 1, 1)
        self.dense_reg_head = nn.Conv2d(64, 4, 1)
        self.disc = nn.Sequential(nn.Conv2d(c, 64, 1), nn.ReLU(inplace=True), nn.Conv2d(64, 1, 1))
        p = self.cfg.pool_size
        self.roi_fc = nn.Linear(c * p * p, self.cfg.hidden)
        self.iou_head = nn.Linear(self.cfg.hidden, 1)
        self.roi_reg_head = nn.Linear(self.cfg.hidden, 4)

    @property
    def stride(self) -> int:
        return self.backbone.stride

    def features(self, image: np.ndarray) -> torch.Tensor:
        return self.backbone(image_to_tensor(image))

    def dense_forward(self, feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """feat (C, h, w) -> centerness (h, w), offsets (h, w, 4)."""
        mid = self.dense(feat[None])
        cent = self.cent_head(mid)[0, 0]
        reg = self.dense_reg_head(mid)[0].permute(1, 2, 0)
        return cent, reg

    def affinity(self, feat: torch.Tensor) -> torch.Tensor:
        """Per-pixel target-domain probability; trains on detached features."""
        return torch.sigmoid(self.disc(feat.detach()[None])[0, 0])

    def roi_forward(self, feat: torch.Tensor, boxes: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
        """(iou predictions (N,), reg deltas (N, 4)) for boxes in image coords."""
        pooled = roi_align(feat, boxes, self.cfg.pool_size, spatial_scale=1.0 / self.stride)
        hid = torch.relu(self.roi_fc(pooled.flatten(1)))
        return self.iou_head(hid)[:, 0], self.roi_reg_head(hid)


# ---------------------------------------------------------------------------
# training and inference
# ---------------------------------------------------------------------------

def scene_loss(
    net: TrolnNet, image: np.ndarray, gt_boxes: np.ndarray, domain_label: float,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Full re-weighted loss for one labeled scene."""
    feat = net.features(image)
    affinity = net.affinity(feat)
    l_dis = discriminator_loss(affinity, domain_label)
    aff_np = affinity.detach().double().numpy()

    cent_map, reg_map = net.dense_forward(feat)
    cells, cent_tgt, off_tgt = dense_targets(gt_boxes, cent_map.shape, net.stride)
    if len(cells) > 0:
        cent_pred = cent_map[cells[:, 0], cells[:, 1]]
        rpn_reg_pred = reg_map[cells[:, 0], cells[:, 1]]
        tau1 = torch.tensor(aff_np[cells[:, 0], cells[:, 1]], dtype=cent_pred.dtype)
    else:
        cent_pred = cent_map.new_zeros(0)
        rpn_reg_pred = cent_map.new_zeros((0, 4))
        tau1 = cent_map.new_zeros(0)
    cent_tgt_t = torch.as_tensor(cent_tgt, dtype=cent_pred.dtype)
    off_tgt_t = torch.as_tensor(off_tgt, dtype=cent_pred.dtype)

    h, w = image.shape[:2]
    proposals = gt_jitter_proposals(
        gt_boxes, (h, w), rng, levels=(0.0, 0.04, 0.09, 0.15, 0.22, 0.3, 0.4)
    )
    pos, iou_tgt, rcnn_tgt = proposal_iou_targets(proposals, gt_boxes, net.cfg.pos_iou)
    if len(pos) > 0:
        iou_pred_all, reg_pred_all = net.roi_forward(feat, proposals[pos])
        tau2 = torch.tensor(
            [affinity_pool(aff_np, proposals[p] / net.stride, net.cfg.pool_size) for p in pos],
            dtype=iou_pred_all.dtype,
        )
        iou_pred, rcnn_reg_pred = iou_pred_all, reg_pred_all
    else:
        iou_pred = cent_map.new_zeros(0)
        rcnn_reg_pred = cent_map.new_zeros((0, 4))
        tau2 = cent_map.new_zeros(0)
    iou_tgt_t = torch.as_tensor(iou_tgt, dtype=iou_pred.dtype)
    rcnn_tgt_t = torch.as_tensor(rcnn_tgt, dtype=iou_pred.dtype)

    return troln_loss(
        cent_pred, cent_tgt_t, tau1, rpn_reg_pred, off_tgt_t,
        iou_pred, iou_tgt_t, tau2, rcnn_reg_pred, rcnn_tgt_t, l_dis,
    )


def train_troln(
    source_scenes: list,
    styled_scenes: list,
    seed: int,
    steps: int = 2000,
    lr: float = 1e-3,
    cfg: TrolnConfig | None = None,
    log_writer=None,
) -> TrolnNet:
    """Train on an even mix: every step sees one source and one styled scene."""
    if not source_scenes or not styled_scenes:
        raise ValueError("need scenes from both the source and styled pools")
    torch.manual_seed(seed & 0x7FFFFFFF)
    net = TrolnNet(cfg)
    optim = torch.optim.Adam(net.parameters(), lr=lr)
    rng = rng_for(seed, "troln-train")
    for step in range(steps):
        src = source_scenes[int(rng.integers(len(source_scenes)))]
        sty = styled_scenes[int(rng.integers(len(styled_scenes)))]
        loss_s, parts_s = scene_loss(net, src.image, src.boxes, 0.0, rng)
        loss_t, parts_t = scene_loss(net, sty.image, sty.boxes, 1.0, rng)
        loss = loss_s + loss_t
        optim.zero_grad()
        loss.backward()
        optim.step()
        if log_writer is not None:
            log_writer.write(
                {
                    "step": step,
                    "loss": float(loss.detach()),
                    "loc_s": parts_s["loc"],
                    "loc_t": parts_t["loc"],
                    "dis": parts_s["dis"] + parts_t["dis"],
                }
            )
    net.eval()
    return net


@dataclass
class LocalizedProposal:
    """A class-agnostic proposal with its quality and affinity scalars."""

    box: np.ndarray
    c: float
    b: float
    tau1: float
    tau2: float

    def to_dict(self) -> dict:
        return {
            "box": [float(v) for v in self.box],
            "c": self.c,
            "b": self.b,
            "tau1": self.tau1,
            "tau2": self.tau2,
        }


def troln_infer(net: TrolnNet, image: np.ndarray) -> list[LocalizedProposal]:
    """Propose boxes and score each with (c, b, tau1, tau2), all in [0, 1].

    Dense centerness ranks candidate boxes decoded from the offset head;
    survivors of NMS get their centerness and tau1 read at their center
    cell, their IoU prediction from the ROI head, and tau2 from pooling the
    affinity map — all from one shared forward pass.
    """
    cfg = net.cfg
    h, w = image.shape[:2]
    with torch.no_grad():
        feat = net.features(image)
        cent_map, reg_map = net.dense_forward(feat)
        affinity = net.affinity(feat)
    cent_np = cent_map.double().numpy()
    reg_np = reg_map.double().numpy()
    aff_np = affinity.double().numpy()
    fh, fw = cent_np.shape
    s = net.stride

    rows, cols = np.unravel_index(np.argsort(-cent_np, axis=None, kind="stable")[: cfg.pre_nms], cent_np.shape)
    boxes, scores = [], []
    for row, col in zip(rows, cols):
        px, py = (col + 0.5) * s, (row + 0.5) * s
        l, t, r, b = reg_np[row, col] * s
        boxes.append([px - l, py - t, px + r, py + b])
        scores.append(cent_np[row, col])
    boxes = clip_boxes(np.asarray(boxes, dtype=np.float64), h, w)
    scores = np.asarray(scores, dtype=np.float64)
    good = (boxes[:, 2] - boxes[:, 0] >= cfg.min_box_size) & (
        boxes[:, 3] - boxes[:, 1] >= cfg.min_box_size
    )
    boxes, scores = boxes[good], scores[good]
    if len(boxes) == 0:
        return []
    keep = nms(boxes, scores, cfg.nms_iou)[: cfg.post_nms]
    boxes = boxes[keep]

    with torch.no_grad():
        iou_pred, _ = net.roi_forward(feat, boxes)
    iou_np = iou_pred.double().numpy()

    out = []
    for i, box in enumerate(boxes):
        cx, cy = (box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0
        cell = cell_for_point(cx, cy, (fh, fw), s)
        tau1, tau2 = affinity_weights(aff_np, cell, box, s, cfg.pool_size)
        out.append(
            LocalizedProposal(
                box=box,
                c=float(np.clip(cent_np[cell], 0.0, 1.0)),
                b=float(np.clip(iou_np[i], 0.0, 1.0)),
                tau1=tau1,
                tau2=tau2,
            )
        )
    return out


def save_troln(net: TrolnNet, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "config": asdict(net.cfg),
            "state_dict": net.state_dict(),
        },
        path,
    )


def load_troln(path: str | Path) -> TrolnNet:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format: {blob.get('format_version')!r}")
    net = TrolnNet(TrolnConfig(**blob["config"]))
    net.load_state_dict(blob["state_dict"])
    net.eval()
    return net

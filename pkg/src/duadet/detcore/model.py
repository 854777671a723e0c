"""Small two-stage detector: conv backbone, RPN, ROI classification head."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .geometry import clip_boxes, decode_boxes
from .roialign import roi_align

CHECKPOINT_FORMAT_VERSION = 1


def image_to_tensor(image: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(H, W, 3) float array in [0, 1] -> (3, H, W) tensor."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).to(dtype)


class Backbone(nn.Module):
    """Three stride-2 conv blocks; total stride 8."""

    stride = 8

    def __init__(self, out_channels: int = 64):
        super().__init__()
        self.out_channels = out_channels
        self.net = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1),
            nn.GroupNorm(8, 32),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.GroupNorm(8, 64),
            nn.ReLU(inplace=True),
            nn.Conv2d(64, out_channels, 3, stride=2, padding=1),
            nn.GroupNorm(8, out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() != 3:
            raise ValueError("expected a single (3, H, W) image")
        return self.net(image[None])[0]


class RoiHead(nn.Module):
    """Shared classification/regression branch over pooled instance features.

    Classification emits num_classes + 1 logits with background last;
    regression emits 4 deltas per foreground class.
    """

    def __init__(self, in_channels: int = 64, num_classes: int = 3, pool_size: int = 7, hidden: int = 128):
        super().__init__()
        self.num_classes = num_classes
        self.pool_size = pool_size
        self.fc = nn.Linear(in_channels * pool_size * pool_size, hidden)
        self.cls = nn.Linear(hidden, num_classes + 1)
        self.reg = nn.Linear(hidden, 4 * num_classes)

    def trunk(self, roi_feats: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.fc(roi_feats.flatten(1)))

    def forward(self, roi_feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        hid = self.trunk(roi_feats)
        return self.cls(hid), self.reg(hid)

    def classify(self, roi_feats: torch.Tensor) -> torch.Tensor:
        """Classification branch alone: (N, C, P, P) -> (N, num_classes + 1)."""
        return self.cls(self.trunk(roi_feats))


@dataclass(frozen=True)
class DetectorConfig:
    num_classes: int = 3
    channels: int = 64
    pool_size: int = 7
    hidden: int = 128
    anchor_size: float = 20.0
    nms_iou: float = 0.5
    rpn_pre_nms: int = 32
    rpn_post_nms: int = 12
    rpn_nms_iou: float = 0.7


class Detector(nn.Module):
    def __init__(self, cfg: DetectorConfig | None = None):
        super().__init__()
        from .proposals import RpnHead  # late import to avoid a cycle

        self.cfg = cfg or DetectorConfig()
        self.backbone = Backbone(self.cfg.channels)
        self.rpn = RpnHead(self.cfg.channels)
        self.roi_head = RoiHead(
            self.cfg.channels, self.cfg.num_classes, self.cfg.pool_size, self.cfg.hidden
        )

    @property
    def stride(self) -> int:
        return self.backbone.stride

    def features(self, image: np.ndarray) -> torch.Tensor:
        return self.backbone(image_to_tensor(image))

    def roi_features(self, feat: torch.Tensor, boxes: np.ndarray) -> torch.Tensor:
        return roi_align(feat, boxes, self.cfg.pool_size, spatial_scale=1.0 / self.stride)

    def score_proposals(
        self, feat: torch.Tensor, proposals: np.ndarray, image_hw: tuple[int, int]
    ) -> list[dict]:
        """Run the ROI head over proposals; one output row per proposal.

        Each row carries {proposal_id, box, cls}: the box decoded from the
        deltas of the argmax foreground class (clipped to the image) and the
        softmax over all classes with background last.
        """
        proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
        if len(proposals) == 0:
            return []
        with torch.no_grad():
            cls_logits, reg = self.roi_head(self.roi_features(feat, proposals))
        cls_np = cls_logits.double().numpy()
        reg_np = reg.double().numpy()
        fg_arg = cls_np[:, : self.cfg.num_classes].argmax(axis=1)
        deltas = np.stack([reg_np[i, 4 * c : 4 * c + 4] for i, c in enumerate(fg_arg)])
        boxes = clip_boxes(decode_boxes(proposals, deltas), *image_hw)
        probs = softmax_rows(cls_np)
        return [
            {"proposal_id": i, "box": boxes[i].tolist(), "cls": probs[i].tolist()}
            for i in range(len(proposals))
        ]


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    return probs


def detections_from_outputs(outputs: list[dict], nms_iou: float = 0.5) -> list[dict]:
    """Final detection list from per-proposal head outputs.

    Proposals whose argmax over all classes (background included) is the
    background are dropped; survivors are ranked by their best foreground
    probability and filtered with class-agnostic NMS.
    """
    from .geometry import nms  # local to keep module import light

    if not outputs:
        return []
    boxes = np.asarray([o["box"] for o in outputs], dtype=np.float64)
    cls = np.asarray([o["cls"] for o in outputs], dtype=np.float64)
    k = cls.shape[1] - 1
    idx = np.flatnonzero(cls.argmax(axis=1) != k)
    if len(idx) == 0:
        return []
    fg = cls[idx, :k]
    scores = fg.max(axis=1)
    labels = fg.argmax(axis=1)
    kept = nms(boxes[idx], scores, nms_iou)
    return [
        {
            "box": boxes[idx[j]].tolist(),
            "label": int(labels[j]),
            "score": float(scores[j]),
            "cls": cls[idx[j]].tolist(),
            "proposal_id": int(outputs[idx[j]]["proposal_id"]),
        }
        for j in kept
    ]


def save_detector(detector: Detector, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "config": asdict(detector.cfg),
            "state_dict": detector.state_dict(),
        },
        path,
    )


def load_detector(path: str | Path) -> Detector:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format: {blob.get('format_version')!r}")
    detector = Detector(DetectorConfig(**blob["config"]))
    detector.load_state_dict(blob["state_dict"])
    detector.eval()
    return detector

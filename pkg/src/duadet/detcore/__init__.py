"""Two-stage detector core: box geometry, ROI pooling, model, losses."""
from .geometry import clip_boxes, decode_boxes, encode_boxes, iou_matrix, nms, pairwise_iou
from .losses import detection_loss, match_proposals
from .model import (
    Backbone,
    Detector,
    DetectorConfig,
    RoiHead,
    detections_from_outputs,
    image_to_tensor,
    load_detector,
    save_detector,
    softmax_rows,
)
from .proposals import (
    RpnHead,
    anchor_grid,
    gt_jitter_proposals,
    learned_propose,
    random_proposals,
    rpn_loss,
    rpn_targets,
)
from .roialign import roi_align

__all__ = [
    "Backbone",
    "Detector",
    "DetectorConfig",
    "RoiHead",
    "RpnHead",
    "anchor_grid",
    "clip_boxes",
    "decode_boxes",
    "detection_loss",
    "detections_from_outputs",
    "encode_boxes",
    "gt_jitter_proposals",
    "image_to_tensor",
    "iou_matrix",
    "learned_propose",
    "load_detector",
    "match_proposals",
    "nms",
    "pairwise_iou",
    "random_proposals",
    "roi_align",
    "rpn_loss",
    "rpn_targets",
    "save_detector",
    "softmax_rows",
]

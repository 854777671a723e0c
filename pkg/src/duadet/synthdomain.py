"""Synthetic two-domain scene generator.

Scenes are textured backgrounds with 1..N colored geometric objects whose
class is a (shape, color) combination.  The target domain re-renders the
same kind of content through a fixed parametric style transform (hue shift,
contrast change, blur, noise, white haze) standing in for a weather-style
domain gap.  A source scene restyled with the same transform becomes a
"source2target" scene that keeps its labels.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image
from scipy.ndimage import gaussian_filter

from .imageops import bilinear_resize, crop_box
from .utils import read_json, rng_for, write_json

log = logging.getLogger(__name__)

DOMAIN_SOURCE = "S"
DOMAIN_TARGET = "T"
DOMAIN_SOURCE2TARGET = "T'"
DOMAINS = (DOMAIN_SOURCE, DOMAIN_TARGET, DOMAIN_SOURCE2TARGET)

# shape/color combinations cycled to build the class palette
_SHAPES = ("circle", "square", "triangle", "diamond")
_COLORS = (
    (0.85, 0.15, 0.15),
    (0.10, 0.70, 0.20),
    (0.15, 0.25, 0.85),
    (0.85, 0.75, 0.10),
    (0.70, 0.15, 0.75),
    (0.10, 0.70, 0.70),
)


@dataclass(frozen=True)
class StyleParams:
    """Parametric style transform; (0, 1, 0, 0, 0) is the identity."""

    hue_shift: float = 0.0
    contrast_scale: float = 1.0
    blur_sigma: float = 0.0
    noise_std: float = 0.0
    haze_alpha: float = 0.0

    def __post_init__(self):
        if self.blur_sigma < 0 or self.noise_std < 0:
            raise ValueError("blur_sigma and noise_std must be >= 0")
        if not 0.0 <= self.haze_alpha <= 1.0:
            raise ValueError("haze_alpha must lie in [0, 1]")

    @property
    def is_identity(self) -> bool:
        return (
            self.hue_shift == 0.0
            and self.contrast_scale == 1.0
            and self.blur_sigma == 0.0
            and self.noise_std == 0.0
            and self.haze_alpha == 0.0
        )


# default "fog" surrogate used for the target domain
DEFAULT_TARGET_STYLE = StyleParams(
    hue_shift=0.05, contrast_scale=0.8, blur_sigma=0.8, noise_std=0.015, haze_alpha=0.35
)


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 3
    min_object_size: int = 12
    max_object_size: int = 28
    texture_strength: float = 0.18
    target_style: StyleParams = field(default_factory=lambda: DEFAULT_TARGET_STYLE)

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ValueError("scene size must be at least 16x16")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("bad object count range")
        if self.max_object_size >= min(self.height, self.width):
            raise ValueError("objects must fit inside the scene")


@dataclass
class LabeledScene:
    """Raster plus ground truth: boxes (N,4) as (x1,y1,x2,y2), labels (N,)."""

    image: np.ndarray
    boxes: np.ndarray
    labels: np.ndarray
    domain: str
    seed: int

    def validate(self) -> None:
        h, w = self.image.shape[:2]
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError("image must be (H, W, 3)")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if len(self.boxes) != len(self.labels):
            raise ValueError("boxes and labels must have equal length")
        for x1, y1, x2, y2 in self.boxes:
            if not (0 <= x1 < x2 <= w and 0 <= y1 < y2 <= h):
                raise ValueError(f"box ({x1},{y1},{x2},{y2}) out of bounds for {w}x{h}")
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain tag {self.domain!r}")


def class_style(label: int, num_classes: int) -> tuple[str, tuple[float, float, float]]:
    """Map a class id to its (shape, base color) combination."""
    if not 0 <= label < num_classes:
        raise ValueError(f"label {label} outside 0..{num_classes - 1}")
    shape = _SHAPES[label % len(_SHAPES)]
    color = _COLORS[label % len(_COLORS)]
    return shape, color


def _shape_mask(shape: str, x1: int, y1: int, x2: int, y2: int, h: int, w: int) -> np.ndarray:
    """Boolean pixel-center mask of the shape inscribed in its tight box."""
    ys, xs = np.mgrid[0:h, 0:w]
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    rx, ry = (x2 - x1) / 2.0, (y2 - y1) / 2.0
    px, py = xs + 0.5, ys + 0.5
    if shape == "circle":
        return ((px - cx) / rx) ** 2 + ((py - cy) / ry) ** 2 <= 1.0
    if shape == "square":
        return (px >= x1) & (px <= x2) & (py >= y1) & (py <= y2)
    if shape == "triangle":
        # apex at top center, base along the bottom edge
        inside_y = (py >= y1) & (py <= y2)
        half_width = rx * (py - y1) / max(y2 - y1, 1e-9)
        return inside_y & (np.abs(px - cx) <= half_width)
    if shape == "diamond":
        return np.abs(px - cx) / rx + np.abs(py - cy) / ry <= 1.0
    raise ValueError(f"unknown shape {shape!r}")


def _textured_background(rng: np.random.Generator, h: int, w: int, strength: float) -> np.ndarray:
    base = rng.uniform(0.35, 0.65)
    noise = rng.normal(0.0, 1.0, size=(h, w))
    smooth = gaussian_filter(noise, sigma=max(h, w) / 12.0)
    span = smooth.max() - smooth.min()
    if span > 0:
        smooth = (smooth - smooth.min()) / span - 0.5
    img = np.clip(base + strength * smooth, 0.05, 0.95)
    tint = rng.uniform(-0.03, 0.03, size=3)
    return np.clip(img[:, :, None] + tint[None, None, :], 0.0, 1.0)


def _generate_canvas(seed: int, cfg: SceneConfig):
    """Geometry and painting for a scene; style-free and domain-independent."""
    rng = rng_for(seed, "scene-geometry")
    h, w = cfg.height, cfg.width
    image = _textured_background(rng, h, w, cfg.texture_strength)

    n_objects = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    boxes, labels = [], []
    attempts = 0
    while len(boxes) < n_objects and attempts < 50 * n_objects:
        attempts += 1
        size_x = int(rng.integers(cfg.min_object_size, cfg.max_object_size + 1))
        size_y = int(rng.integers(cfg.min_object_size, cfg.max_object_size + 1))
        x1 = int(rng.integers(0, w - size_x + 1))
        y1 = int(rng.integers(0, h - size_y + 1))
        box = (x1, y1, x1 + size_x, y1 + size_y)
        if any(_box_iou(box, b) > 0.2 for b in boxes):
            continue
        label = int(rng.integers(0, cfg.num_classes))
        shape, color = class_style(label, cfg.num_classes)
        jitter = rng.uniform(-0.06, 0.06, size=3)
        fill = np.clip(np.asarray(color) + jitter, 0.0, 1.0)
        mask = _shape_mask(shape, *box, h, w)
        image[mask] = fill
        boxes.append(box)
        labels.append(label)

    boxes_arr = np.asarray(boxes, dtype=np.float64).reshape(len(boxes), 4)
    labels_arr = np.asarray(labels, dtype=np.int64)
    return image.astype(np.float64), boxes_arr, labels_arr


def _box_iou(a, b) -> float:
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix2 - ix1), max(0.0, iy2 - iy1)
    inter = iw * ih
    if inter == 0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def apply_style(
    image: np.ndarray, style: StyleParams, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Apply the style transform: hue -> contrast -> blur -> noise -> haze.

    A generator is required only when noise_std > 0.
    """
    out = image.astype(np.float64).copy()
    if style.hue_shift != 0.0:
        hsv = rgb_to_hsv(np.clip(out, 0.0, 1.0))
        hsv[..., 0] = (hsv[..., 0] + style.hue_shift) % 1.0
        out = hsv_to_rgb(hsv)
    if style.contrast_scale != 1.0:
        out = (out - 0.5) * style.contrast_scale + 0.5
    if style.blur_sigma > 0.0:
        for c in range(3):
            out[..., c] = gaussian_filter(out[..., c], sigma=style.blur_sigma)
    if style.noise_std > 0.0:
        if rng is None:
            raise ValueError("noise_std > 0 requires a random generator")
        out = out + rng.normal(0.0, style.noise_std, size=out.shape)
    if style.haze_alpha > 0.0:
        out = (1.0 - style.haze_alpha) * out + style.haze_alpha * 1.0
    return np.clip(out, 0.0, 1.0)


def gen_scene(seed: int, domain: str, cfg: SceneConfig) -> LabeledScene:
    """Generate one scene; pure function of (seed, domain, cfg).

    Source and target scenes produced from the same seed share geometry and
    labels; target scenes additionally pass through cfg.target_style.
    Source2target scenes are derived via stylize_to_target, not generated.
    """
    cfg.validate()
    if domain == DOMAIN_SOURCE2TARGET:
        raise ValueError("source2target scenes come from stylize_to_target()")
    if domain not in (DOMAIN_SOURCE, DOMAIN_TARGET):
        raise ValueError(f"unknown domain tag {domain!r}")

    image, boxes, labels = _generate_canvas(seed, cfg)
    if domain == DOMAIN_TARGET:
        image = apply_style(image, cfg.target_style, rng_for(seed, "target-style"))
    scene = LabeledScene(image=image, boxes=boxes, labels=labels, domain=domain, seed=seed)
    scene.validate()
    return scene


def stylize_to_target(scene: LabeledScene, style: StyleParams) -> LabeledScene:
    """Re-render a source scene in target style; boxes/labels copied as-is."""
    if scene.domain != DOMAIN_SOURCE:
        raise ValueError("only source scenes can be stylized to the target domain")
    image = apply_style(scene.image, style, rng_for(scene.seed, "stylize-to-target"))
    return LabeledScene(
        image=image,
        boxes=scene.boxes.copy(),
        labels=scene.labels.copy(),
        domain=DOMAIN_SOURCE2TARGET,
        seed=scene.seed,
    )


@dataclass
class CorpusItem:
    crop: np.ndarray
    label: int
    domain: str
    scene_seed: int


def build_instance_corpus(scenes: list[LabeledScene], crop_size: int = 32) -> list[CorpusItem]:
    """Cut one resized crop per ground-truth box from source/source2target scenes."""
    corpus: list[CorpusItem] = []
    for scene in scenes:
        if scene.domain not in (DOMAIN_SOURCE, DOMAIN_SOURCE2TARGET):
            raise ValueError("instance corpus takes source and source2target scenes only")
        for box, label in zip(scene.boxes, scene.labels):
            x1, y1, x2, y2 = box
            if (x2 - x1) * (y2 - y1) < 1.0:
                log.warning("skipping degenerate box %s in scene %d", box, scene.seed)
                continue
            crop = crop_box(scene.image, box)
            crop = bilinear_resize(crop, crop_size, crop_size)
            corpus.append(CorpusItem(crop=crop, label=int(label), domain=scene.domain, scene_seed=scene.seed))
    return corpus


# ---------------------------------------------------------------------------
# persistence: directory of PNG rasters plus one JSON index
# ---------------------------------------------------------------------------

def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def _from_uint8(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 255.0


def save_scenes(scenes: list[LabeledScene], out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for i, scene in enumerate(scenes):
        name = f"scene_{i:05d}.png"
        Image.fromarray(_to_uint8(scene.image)).save(out_dir / name)
        index.append(
            {
                "file": name,
                "boxes": [[float(v) for v in box] for box in scene.boxes],
                "labels": [int(v) for v in scene.labels],
                "domain": scene.domain,
                "seed": int(scene.seed),
            }
        )
    write_json(out_dir / "index.json", {"scenes": index})


def load_scenes(in_dir: str | Path) -> list[LabeledScene]:
    in_dir = Path(in_dir)
    index = read_json(in_dir / "index.json")
    scenes = []
    for entry in index["scenes"]:
        raw = np.asarray(Image.open(in_dir / entry["file"]))
        scene = LabeledScene(
            image=_from_uint8(raw),
            boxes=np.asarray(entry["boxes"], dtype=np.float64).reshape(-1, 4),
            labels=np.asarray(entry["labels"], dtype=np.int64),
            domain=entry["domain"],
            seed=int(entry["seed"]),
        )
        scene.validate()
        scenes.append(scene)
    return scenes


def save_corpus(corpus: list[CorpusItem], out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for i, item in enumerate(corpus):
        name = f"crop_{i:05d}.png"
        Image.fromarray(_to_uint8(item.crop)).save(out_dir / name)
        index.append(
            {"file": name, "label": item.label, "domain": item.domain, "seed": item.scene_seed}
        )
    write_json(out_dir / "index.json", {"crops": index})


def load_corpus(in_dir: str | Path) -> list[CorpusItem]:
    in_dir = Path(in_dir)
    index = read_json(in_dir / "index.json")
    corpus = []
    for entry in index["crops"]:
        raw = np.asarray(Image.open(in_dir / entry["file"]))
        corpus.append(
            CorpusItem(
                crop=_from_uint8(raw),
                label=int(entry["label"]),
                domain=entry["domain"],
                scene_seed=int(entry["seed"]),
            )
        )
    return corpus

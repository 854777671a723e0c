"""Instance-classification teacher trained on the mixed-style crop corpus.

The teacher sees crops from both the source domain and its target-styled
rendition, so its decision function cannot lean on domain appearance.  After
training it is frozen and only ever queried for pre-softmax logits over the
foreground classes (no background output).
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .imageops import bilinear_resize
from .synthdomain import DOMAIN_SOURCE, DOMAIN_SOURCE2TARGET, CorpusItem, StyleParams, apply_style
from .utils import rng_for, write_json

CHECKPOINT_FORMAT_VERSION = 1


class ClassifierTeacher(nn.Module):
    """Small conv classifier over square crops; emits K foreground logits."""

    def __init__(self, num_classes: int, input_size: int = 32):
        super().__init__()
        if input_size % 8 != 0:
            raise ValueError("input_size must be a multiple of 8")
        self.num_classes = num_classes
        self.input_size = input_size
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1),
            nn.GroupNorm(4, 16),
            nn.ReLU(inplace=True),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.GroupNorm(4, 32),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 32, 3, stride=2, padding=1),
            nn.GroupNorm(4, 32),
            nn.ReLU(inplace=True),
        )
        side = input_size // 8
        self.fc1 = nn.Linear(32 * side * side, 64)
        self.fc2 = nn.Linear(64, num_classes)

    def forward(self, crops: torch.Tensor) -> torch.Tensor:
        """(N, 3, S, S) -> (N, K) pre-softmax logits."""
        if crops.shape[-1] != self.input_size or crops.shape[-2] != self.input_size:
            raise ValueError(
                f"teacher expects {self.input_size}x{self.input_size} crops, "
                f"got {tuple(crops.shape[-2:])}"
            )
        hid = torch.relu(self.fc1(self.features(crops).flatten(1)))
        return self.fc2(hid)

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @property
    def is_frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())


def augment_crop(crop: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random sub-crop (>= 80% of the area) plus mild hue/contrast jitter."""
    h, w = crop.shape[:2]
    fh = rng.uniform(np.sqrt(0.8), 1.0)
    fw = rng.uniform(np.sqrt(0.8), 1.0)
    ch = max(2, int(round(h * fh)))
    cw = max(2, int(round(w * fw)))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    sub = crop[y0 : y0 + ch, x0 : x0 + cw]
    sub = bilinear_resize(sub, h, w)
    jitter = StyleParams(
        hue_shift=float(rng.uniform(-0.1, 0.1)),
        contrast_scale=float(rng.uniform(0.9, 1.1)),
    )
    return apply_style(sub, jitter)


def crops_to_tensor(crops: list[np.ndarray] | np.ndarray, dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([np.asarray(c, dtype=np.float64) for c in crops])
    return torch.from_numpy(arr.transpose(0, 3, 1, 2)).to(dtype)


def split_corpus(
    corpus: list[CorpusItem], seed: int, holdout_frac: float = 0.2
) -> tuple[list[int], list[int]]:
    """Deterministic train/holdout index split."""
    rng = rng_for(seed, "teacher-split")
    order = rng.permutation(len(corpus))
    n_holdout = max(1, int(round(holdout_frac * len(corpus)))) if len(corpus) > 1 else 0
    holdout = sorted(int(i) for i in order[:n_holdout])
    train = sorted(int(i) for i in order[n_holdout:])
    return train, holdout


def train_teacher(
    corpus: list[CorpusItem],
    num_classes: int,
    seed: int,
    epochs: int = 20,
    batch_size: int = 32,
    lr: float = 1e-3,
    input_size: int = 32,
    split_manifest_path: str | Path | None = None,
) -> tuple[ClassifierTeacher, list[dict]]:
    """Supervised training on the crop corpus; returns the frozen teacher.

    Refuses corpora that miss a class (the teacher must cover all of them)
    or that contain only a single style domain.
    """
    present = {item.label for item in corpus}
    missing = set(range(num_classes)) - present
    if missing:
        raise ValueError(f"corpus is missing classes {sorted(missing)}")
    domains = {item.domain for item in corpus}
    if not {DOMAIN_SOURCE, DOMAIN_SOURCE2TARGET} <= domains:
        raise ValueError("corpus must mix source and source2target crops")

    train_idx, holdout_idx = split_corpus(corpus, seed)
    if split_manifest_path is not None:
        write_json(
            split_manifest_path,
            {"seed": seed, "train": train_idx, "holdout": holdout_idx},
        )

    torch.manual_seed(seed & 0x7FFFFFFF)
    teacher = ClassifierTeacher(num_classes, input_size)
    optim = torch.optim.Adam(teacher.parameters(), lr=lr)
    rng = rng_for(seed, "teacher-train")

    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(train_idx))
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, len(order), batch_size):
            batch = [corpus[train_idx[i]] for i in order[start : start + batch_size]]
            crops = [augment_crop(item.crop, rng) for item in batch]
            x = crops_to_tensor(crops)
            y = torch.tensor([item.label for item in batch], dtype=torch.long)
            logits = teacher(x)
            loss = F.cross_entropy(logits, y)
            optim.zero_grad()
            loss.backward()
            optim.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        row = {"epoch": epoch, "loss": epoch_loss / max(n_batches, 1)}
        row.update(_epoch_accuracy(teacher, corpus, train_idx, holdout_idx))
        history.append(row)

    teacher.freeze()
    return teacher, history


def _epoch_accuracy(teacher, corpus, train_idx, holdout_idx) -> dict:
    out = {"train_acc": _accuracy(teacher, [corpus[i] for i in train_idx])}
    if holdout_idx:
        held = [corpus[i] for i in holdout_idx]
        out["holdout_acc"] = _accuracy(teacher, held)
        for domain, key in ((DOMAIN_SOURCE, "holdout_acc_s"), (DOMAIN_SOURCE2TARGET, "holdout_acc_t_prime")):
            subset = [item for item in held if item.domain == domain]
            if subset:
                out[key] = _accuracy(teacher, subset)
    return out


def _accuracy(teacher: ClassifierTeacher, items: list[CorpusItem]) -> float:
    if not items:
        return float("nan")
    with torch.no_grad():
        logits = teacher(crops_to_tensor([item.crop for item in items]))
    pred = logits.argmax(dim=1).numpy()
    truth = np.asarray([item.label for item in items])
    return float((pred == truth).mean())


def teacher_logits(teacher: ClassifierTeacher, crops: list[np.ndarray] | np.ndarray) -> np.ndarray:
    """Frozen-teacher logits, (N, K); crops must match the teacher input size."""
    if not teacher.is_frozen:
        raise ValueError("teacher must be frozen before serving logits")
    with torch.no_grad():
        logits = teacher(crops_to_tensor(crops))
    return logits.double().numpy()


def save_teacher(teacher: ClassifierTeacher, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "num_classes": teacher.num_classes,
            "input_size": teacher.input_size,
            "state_dict": teacher.state_dict(),
        },
        path,
    )


def load_teacher(path: str | Path) -> ClassifierTeacher:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format: {blob.get('format_version')!r}")
    teacher = ClassifierTeacher(blob["num_classes"], blob["input_size"])
    teacher.load_state_dict(blob["state_dict"])
    teacher.freeze()
    return teacher

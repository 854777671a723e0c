"""Experiment configuration: a dataclass tree with an INI file round trip."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class DataSection:
    height: int = 64
    width: int = 64
    num_classes: int = 3
    n_train: int = 24
    n_test: int = 16
    min_objects: int = 1
    max_objects: int = 3
    hue_shift: float = 0.05
    contrast_scale: float = 0.8
    blur_sigma: float = 0.8
    noise_std: float = 0.015
    haze_alpha: float = 0.35


@dataclass
class ModelSection:
    channels: int = 64
    pool_size: int = 7
    hidden: int = 128
    anchor_size: float = 20.0
    nms_iou: float = 0.5


@dataclass
class TeacherSection:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.001
    input_size: int = 32


@dataclass
class TrolnSection:
    steps: int = 2000
    lr: float = 0.001
    pre_nms: int = 32
    post_nms: int = 12
    pos_iou: float = 0.3


@dataclass
class TrainSection:
    steps: int = 2000
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lambda_adv: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    grl_lambda: float = 1.0
    distill_iou: float = 0.8
    target_proposals: int = 8
    use_dua: bool = False


@dataclass
class EvalSection:
    consistency_n: int = 500
    match_iou: float = 0.5
    nms_iou: float = 0.5
    use_dce: bool = False


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "runs/default"


_SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "teacher": TeacherSection,
    "troln": TrolnSection,
    "train": TrainSection,
    "eval": EvalSection,
    "run": RunSection,
}


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    troln: TrolnSection = field(default_factory=TrolnSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        read = parser.read(Path(path))
        if not read:
            raise FileNotFoundError(f"config file not found: {path}")
        cfg = cls()
        for name, section_cls in _SECTIONS.items():
            if not parser.has_section(name):
                continue
            section = getattr(cfg, name)
            for f in dataclasses.fields(section_cls):
                if not parser.has_option(name, f.name):
                    continue
                if f.type in ("int", int):
                    value = parser.getint(name, f.name)
                elif f.type in ("float", float):
                    value = parser.getfloat(name, f.name)
                elif f.type in ("bool", bool):
                    value = parser.getboolean(name, f.name)
                else:
                    value = parser.get(name, f.name)
                setattr(section, f.name, value)
            unknown = set(parser.options(name)) - {f.name for f in dataclasses.fields(section_cls)}
            if unknown:
                raise ValueError(f"unknown option(s) in [{name}]: {sorted(unknown)}")
        unknown_sections = set(parser.sections()) - set(_SECTIONS)
        if unknown_sections:
            raise ValueError(f"unknown section(s): {sorted(unknown_sections)}")
        return cfg

    def save(self, path: str | Path) -> None:
        parser = configparser.ConfigParser()
        for name in _SECTIONS:
            section = getattr(self, name)
            parser[name] = {
                f.name: str(getattr(section, f.name)) for f in dataclasses.fields(section)
            }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            parser.write(fh)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

"""The three-stage pipeline: data, teachers, detector, evaluation."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch

from ..dce import dce_pipeline, refined_to_detections, refined_to_outputs
from ..detcore.model import Detector, DetectorConfig, detections_from_outputs
from ..detcore.proposals import learned_propose
from ..dua import DuaTrainer, TrainSettings
from ..synthdomain import (
    DOMAIN_SOURCE,
    DOMAIN_TARGET,
    SceneConfig,
    StyleParams,
    build_instance_corpus,
    gen_scene,
    load_corpus,
    load_scenes,
    save_corpus,
    save_scenes,
    stylize_to_target,
)
from ..teacher_cls import load_teacher, save_teacher, train_teacher
from ..troln import TrolnConfig, load_troln, save_troln, train_troln
from ..utils import JsonlWriter, rng_for, write_json
from .config import ExperimentConfig
from .reports import compute_report

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


def scene_config(cfg: ExperimentConfig) -> SceneConfig:
    d = cfg.data
    return SceneConfig(
        height=d.height,
        width=d.width,
        num_classes=d.num_classes,
        min_objects=d.min_objects,
        max_objects=d.max_objects,
        target_style=StyleParams(
            hue_shift=d.hue_shift,
            contrast_scale=d.contrast_scale,
            blur_sigma=d.blur_sigma,
            noise_std=d.noise_std,
            haze_alpha=d.haze_alpha,
        ),
    )


def data_dir(run_dir: str | Path) -> Path:
    return Path(run_dir) / "data"


def generate_datasets(cfg: ExperimentConfig, run_dir: str | Path) -> dict[str, Path]:
    """Write the five splits plus the instance-crop corpus under run_dir/data.

    Training source and target scenes use disjoint seed streams (unpaired
    content); the two test splits share seeds, so they show the same scenes
    in the two styles and the AP gap isolates the style shift.
    """
    seed = cfg.run.seed
    scfg = scene_config(cfg)
    base = data_dir(run_dir)

    train_s_seeds = rng_for(seed, "data-train-source").integers(0, 2**31 - 1, size=cfg.data.n_train)
    train_t_seeds = rng_for(seed, "data-train-target").integers(0, 2**31 - 1, size=cfg.data.n_train)
    test_seeds = rng_for(seed, "data-test").integers(0, 2**31 - 1, size=cfg.data.n_test)

    train_s = [gen_scene(int(s), DOMAIN_SOURCE, scfg) for s in train_s_seeds]
    train_t = [gen_scene(int(s), DOMAIN_TARGET, scfg) for s in train_t_seeds]
    train_tp = [stylize_to_target(scene, scfg.target_style) for scene in train_s]
    test_s = [gen_scene(int(s), DOMAIN_SOURCE, scfg) for s in test_seeds]
    test_t = [gen_scene(int(s), DOMAIN_TARGET, scfg) for s in test_seeds]

    paths = {}
    for name, scenes in (
        ("train_source", train_s),
        ("train_target", train_t),
        ("train_source2target", train_tp),
        ("test_source", test_s),
        ("test_target", test_t),
    ):
        paths[name] = base / name
        save_scenes(scenes, paths[name])

    corpus = build_instance_corpus(train_s + train_tp, crop_size=cfg.teacher.input_size)
    paths["corpus"] = base / "corpus"
    save_corpus(corpus, paths["corpus"])

    write_json(
        base / "manifest.json",
        {
            "seed": seed,
            "splits": {k: str(v.name) for k, v in paths.items()},
            "n_train": cfg.data.n_train,
            "n_test": cfg.data.n_test,
            "corpus_size": len(corpus),
        },
    )
    log.info("wrote datasets under %s (corpus of %d crops)", base, len(corpus))
    return paths


def run_stage1(cfg: ExperimentConfig, run_dir: str | Path) -> dict[str, Path]:
    """Train the classification teacher and the localizer; write checkpoints."""
    run_dir = Path(run_dir)
    base = data_dir(run_dir)
    if not (base / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset under {base}; run gen-data first")
    stage = run_dir / "stage1"
    seed = cfg.run.seed

    corpus = load_corpus(base / "corpus")
    teacher, history = train_teacher(
        corpus,
        num_classes=cfg.data.num_classes,
        seed=seed,
        epochs=cfg.teacher.epochs,
        batch_size=cfg.teacher.batch_size,
        lr=cfg.teacher.lr,
        input_size=cfg.teacher.input_size,
        split_manifest_path=stage / "teacher_split.json",
    )
    with JsonlWriter(stage / "teacher_log.jsonl") as writer:
        for row in history:
            writer.write(row)
    save_teacher(teacher, stage / "teacher.pt")

    train_s = load_scenes(base / "train_source")
    train_tp = load_scenes(base / "train_source2target")
    tcfg = TrolnConfig(
        channels=cfg.model.channels,
        pool_size=cfg.model.pool_size,
        hidden=cfg.model.hidden,
        pos_iou=cfg.troln.pos_iou,
        pre_nms=cfg.troln.pre_nms,
        post_nms=cfg.troln.post_nms,
    )
    with JsonlWriter(stage / "troln_log.jsonl") as writer:
        localizer = train_troln(
            train_s, train_tp, seed=seed, steps=cfg.troln.steps, lr=cfg.troln.lr,
            cfg=tcfg, log_writer=writer,
        )
    save_troln(localizer, stage / "troln.pt")
    log.info("stage1 done: teacher + localizer checkpoints under %s", stage)
    return {"teacher": stage / "teacher.pt", "troln": stage / "troln.pt"}


def _variant(use_dua: bool) -> str:
    return "dua" if use_dua else "baseline"


def detector_config(cfg: ExperimentConfig) -> DetectorConfig:
    return DetectorConfig(
        num_classes=cfg.data.num_classes,
        channels=cfg.model.channels,
        pool_size=cfg.model.pool_size,
        hidden=cfg.model.hidden,
        anchor_size=cfg.model.anchor_size,
        nms_iou=cfg.model.nms_iou,
    )


def run_stage2(cfg: ExperimentConfig, run_dir: str | Path, use_dua: bool) -> Path:
    """Train the detector (baseline or distilled) and write its checkpoint."""
    run_dir = Path(run_dir)
    base = data_dir(run_dir)
    stage = run_dir / "stage2"
    seed = cfg.run.seed
    variant = _variant(use_dua)

    train_s = load_scenes(base / "train_source")
    train_t = load_scenes(base / "train_target")
    teacher = load_teacher(run_dir / "stage1" / "teacher.pt") if use_dua else None

    settings = TrainSettings(
        steps=cfg.train.steps,
        lr=cfg.train.lr,
        momentum=cfg.train.momentum,
        weight_decay=cfg.train.weight_decay,
        lambda_adv=cfg.train.lambda_adv,
        lambda1=cfg.train.lambda1,
        lambda2=cfg.train.lambda2,
        grl_lambda=cfg.train.grl_lambda,
        distill_iou=cfg.train.distill_iou,
        target_proposals=cfg.train.target_proposals,
        use_dua=use_dua,
    )
    torch.manual_seed(seed & 0x7FFFFFFF)
    detector = Detector(detector_config(cfg))
    trainer = DuaTrainer(detector, settings, seed, teacher=teacher)
    with JsonlWriter(stage / f"train_{variant}.jsonl") as writer:
        trainer.train(train_s, train_t, log_writer=writer)

    path = stage / f"detector_{variant}.pt"
    save_trainer_checkpoint(trainer, path)
    log.info("stage2 done: %s detector after %d steps -> %s", variant, cfg.train.steps, path)
    return path


def save_trainer_checkpoint(trainer: DuaTrainer, path: str | Path) -> None:
    """Persist everything needed to either evaluate or resume training."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    from dataclasses import asdict

    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "seed": trainer.seed,
            "settings": asdict(trainer.settings),
            "detector_config": asdict(trainer.detector.cfg),
            "detector_state": trainer.detector.state_dict(),
            "img_disc_state": trainer.img_disc.state_dict(),
            "inst_disc_state": trainer.inst_disc.state_dict(),
            "projector_state": (
                trainer.projector.state_dict() if trainer.projector is not None else None
            ),
            "optim_state": trainer.optim.state_dict(),
            "rng_state": trainer.rng.bit_generator.state,
            "steps_done": trainer.step_count,
        },
        path,
    )


def load_detector_checkpoint(path: str | Path) -> Detector:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format: {blob.get('format_version')!r}")
    detector = Detector(DetectorConfig(**blob["detector_config"]))
    detector.load_state_dict(blob["detector_state"])
    detector.eval()
    return detector


def load_trainer_checkpoint(path: str | Path, teacher=None) -> DuaTrainer:
    """Rebuild a trainer mid-run; continuing matches an uninterrupted run bit for bit."""
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format: {blob.get('format_version')!r}")
    settings = TrainSettings(**blob["settings"])
    detector = Detector(DetectorConfig(**blob["detector_config"]))
    trainer = DuaTrainer(detector, settings, blob["seed"], teacher=teacher)
    detector.load_state_dict(blob["detector_state"])
    trainer.img_disc.load_state_dict(blob["img_disc_state"])
    trainer.inst_disc.load_state_dict(blob["inst_disc_state"])
    if trainer.projector is not None:
        trainer.projector.load_state_dict(blob["projector_state"])
    trainer.optim.load_state_dict(blob["optim_state"])
    trainer.rng.bit_generator.state = blob["rng_state"]
    trainer.step_count = blob["steps_done"]
    return trainer


def _eval_image_plain(detector: Detector, image: np.ndarray, nms_iou: float) -> dict:
    h, w = image.shape[:2]
    with torch.no_grad():
        feat = detector.features(image)
    proposals = learned_propose(
        detector.rpn,
        feat,
        (h, w),
        detector.stride,
        detector.cfg.anchor_size,
        pre_nms=detector.cfg.rpn_pre_nms,
        post_nms=detector.cfg.rpn_post_nms,
        nms_iou=detector.cfg.rpn_nms_iou,
    )
    outputs = detector.score_proposals(feat, proposals, (h, w))
    detections = detections_from_outputs(outputs, nms_iou)
    return {"outputs": outputs, "detections": detections}


def _eval_image_dce(detector: Detector, localizer, image: np.ndarray, nms_iou: float) -> dict:
    refined = dce_pipeline(image, detector, localizer, refine=True, nms_iou=nms_iou)
    return {
        "outputs": refined_to_outputs(refined, use_refined=True),
        "outputs_raw": refined_to_outputs(refined, use_refined=False),
        "detections": refined_to_detections(refined),
        "refined": [r.to_dict() for r in refined],
    }


def run_stage3(
    cfg: ExperimentConfig, run_dir: str | Path, use_dua: bool, use_dce: bool
) -> dict:
    """Evaluate one detector variant on both test splits; dump and report."""
    run_dir = Path(run_dir)
    base = data_dir(run_dir)
    stage = run_dir / "stage3"
    variant = _variant(use_dua)
    mode = "dce" if use_dce else "raw"

    detector = load_detector_checkpoint(run_dir / "stage2" / f"detector_{variant}.pt")
    localizer = load_troln(run_dir / "stage1" / "troln.pt") if use_dce else None

    dump = {
        "variant": variant,
        "mode": mode,
        "seed": cfg.run.seed,
        "num_classes": cfg.data.num_classes,
        "consistency_n": cfg.eval.consistency_n,
        "match_iou": cfg.eval.match_iou,
        "splits": {},
    }
    for split, dirname in (("source", "test_source"), ("target", "test_target")):
        rows = []
        for scene in load_scenes(base / dirname):
            if use_dce:
                row = _eval_image_dce(detector, localizer, scene.image, cfg.eval.nms_iou)
            else:
                row = _eval_image_plain(detector, scene.image, cfg.eval.nms_iou)
            row["gt_boxes"] = [[float(v) for v in b] for b in scene.boxes]
            row["gt_labels"] = [int(v) for v in scene.labels]
            rows.append(row)
        dump["splits"][split] = rows

    dump_path = stage / "dumps" / f"{variant}_{mode}.json"
    write_json(dump_path, dump)
    report = compute_report(dump)
    write_json(stage / f"eval_{variant}_{mode}.json", report)
    return report

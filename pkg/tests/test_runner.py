import hashlib
import json
import statistics
from pathlib import Path

import numpy as np
import pytest
import torch

from duadet.detcore import Detector, DetectorConfig
from duadet.dua import DuaTrainer, TrainSettings
from duadet.runner.cli import build_parser, main
from duadet.runner.config import ExperimentConfig
from duadet.runner.reports import (
    GRID_LABELS,
    compute_report,
    regenerate_reports,
    write_aggregate_report,
    write_run_report,
)
from duadet.runner.stages import (
    generate_datasets,
    load_detector_checkpoint,
    load_trainer_checkpoint,
    run_stage1,
    run_stage2,
    run_stage3,
    save_trainer_checkpoint,
)
from duadet.synthdomain import DOMAIN_SOURCE, DOMAIN_TARGET, SceneConfig, gen_scene
from duadet.teacher_cls import ClassifierTeacher
from duadet.utils import read_json


def _tiny_config(seed: int = 0) -> ExperimentConfig:
    cfg = ExperimentConfig()
    cfg.data.n_train = 6
    cfg.data.n_test = 2
    cfg.data.min_objects = 2
    cfg.data.max_objects = 3
    cfg.teacher.epochs = 1
    cfg.troln.steps = 4
    cfg.train.steps = 4
    cfg.eval.consistency_n = 32
    cfg.run.seed = seed
    return cfg


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# config round trip
# ---------------------------------------------------------------------------

def test_config_ini_round_trip(tmp_path):
    cfg = ExperimentConfig()
    cfg.data.n_train = 11
    cfg.train.lambda1 = 0.25
    cfg.train.use_dua = True
    cfg.eval.use_dce = True
    cfg.run.out_dir = "runs/exp7"
    path = tmp_path / "config.ini"
    cfg.save(path)
    back = ExperimentConfig.load(path)
    assert back.to_dict() == cfg.to_dict()


def test_config_defaults_survive_partial_file(tmp_path):
    path = tmp_path / "partial.ini"
    path.write_text("[train]\nsteps = 7\n")
    cfg = ExperimentConfig.load(path)
    assert cfg.train.steps == 7
    assert cfg.train.lr == ExperimentConfig().train.lr
    assert cfg.data.n_train == ExperimentConfig().data.n_train


def test_config_rejects_unknown_option(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[train]\nstepz = 7\n")
    with pytest.raises(ValueError, match="unknown option"):
        ExperimentConfig.load(path)


def test_config_rejects_unknown_section(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[trainer]\nsteps = 7\n")
    with pytest.raises(ValueError, match="unknown section"):
        ExperimentConfig.load(path)


def test_config_missing_file_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        ExperimentConfig.load(tmp_path / "nope.ini")


# ---------------------------------------------------------------------------
# zeroed distillation weights reproduce the baseline exactly
# ---------------------------------------------------------------------------

def test_zero_lambda_distillation_matches_baseline_bitwise():
    """With lambda1 = lambda2 = 0 the distillation terms contribute zero
    gradient everywhere, so the loss trajectory must equal the baseline's
    bit for bit (same seed, same scenes)."""
    scfg = SceneConfig(min_objects=1, max_objects=2)
    src = [gen_scene(300 + i, DOMAIN_SOURCE, scfg) for i in range(2)]
    tgt = [gen_scene(400 + i, DOMAIN_TARGET, scfg) for i in range(2)]

    torch.manual_seed(9)
    teacher = ClassifierTeacher(num_classes=3)
    teacher.freeze()

    def run(use_dua: bool):
        torch.manual_seed(11)
        det = Detector(DetectorConfig())
        settings = TrainSettings(steps=5, use_dua=use_dua, lambda1=0.0, lambda2=0.0)
        trainer = DuaTrainer(det, settings, seed=11, teacher=teacher if use_dua else None)
        history = trainer.train(src, tgt)
        return history, det

    hist_base, det_base = run(False)
    hist_dua, det_dua = run(True)
    shared = ("step", "L_DA", "L_det", "L_adv", "disc_acc")
    for rb, rd in zip(hist_base, hist_dua):
        for key in shared:
            assert rb[key] == rd[key]
    for (name, a), b in zip(det_base.state_dict().items(), det_dua.state_dict().values()):
        assert torch.equal(a, b), name


# ---------------------------------------------------------------------------
# checkpoint resume
# ---------------------------------------------------------------------------

def test_resume_matches_uninterrupted_run(tmp_path):
    scfg = SceneConfig(min_objects=1, max_objects=2)
    src = [gen_scene(500 + i, DOMAIN_SOURCE, scfg) for i in range(2)]
    tgt = [gen_scene(600 + i, DOMAIN_TARGET, scfg) for i in range(2)]

    def fresh(steps: int) -> DuaTrainer:
        torch.manual_seed(21)
        det = Detector(DetectorConfig())
        return DuaTrainer(det, TrainSettings(steps=steps, use_dua=False), seed=21)

    straight = fresh(8)
    hist_straight = straight.train(src, tgt)

    half = fresh(4)
    hist_first = half.train(src, tgt)
    ckpt = tmp_path / "mid.pt"
    save_trainer_checkpoint(half, ckpt)

    resumed = load_trainer_checkpoint(ckpt)
    assert resumed.step_count == 4
    resumed.settings.steps = 8
    hist_second = resumed.train(src, tgt)

    assert hist_first + hist_second == hist_straight
    for (name, a), b in zip(
        straight.detector.state_dict().items(), resumed.detector.state_dict().values()
    ):
        assert torch.equal(a, b), name


def test_load_trainer_checkpoint_rejects_bad_format(tmp_path):
    path = tmp_path / "bad.pt"
    torch.save({"format_version": 99}, path)
    with pytest.raises(ValueError, match="unsupported checkpoint format"):
        load_trainer_checkpoint(path)


# ---------------------------------------------------------------------------
# staged pipeline on a tiny run
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("runs") / "seed0"
    cfg = _tiny_config(seed=0)
    generate_datasets(cfg, run_dir)
    run_stage1(cfg, run_dir)
    run_stage2(cfg, run_dir, use_dua=False)
    run_stage2(cfg, run_dir, use_dua=True)
    for use_dua in (False, True):
        for use_dce in (False, True):
            run_stage3(cfg, run_dir, use_dua=use_dua, use_dce=use_dce)
    return cfg, run_dir


def test_pipeline_artifacts_exist(tiny_run):
    _, run_dir = tiny_run
    for rel in (
        "data/manifest.json",
        "stage1/teacher.pt",
        "stage1/teacher_log.jsonl",
        "stage1/teacher_split.json",
        "stage1/troln.pt",
        "stage1/troln_log.jsonl",
        "stage2/detector_baseline.pt",
        "stage2/detector_dua.pt",
        "stage2/train_baseline.jsonl",
        "stage2/train_dua.jsonl",
        "stage3/dumps/baseline_raw.json",
        "stage3/dumps/baseline_dce.json",
        "stage3/dumps/dua_raw.json",
        "stage3/dumps/dua_dce.json",
        "stage3/eval_baseline_raw.json",
        "stage3/eval_dua_dce.json",
    ):
        assert (run_dir / rel).exists(), rel


def test_gen_data_reruns_bit_identically(tiny_run, tmp_path):
    cfg, run_dir = tiny_run
    other = tmp_path / "again"
    generate_datasets(cfg, other)
    for split_dir in sorted((run_dir / "data").glob("*")):
        if not split_dir.is_dir():
            continue
        for f in sorted(split_dir.rglob("*")):
            if f.is_file():
                twin = other / "data" / f.relative_to(run_dir / "data")
                assert _file_hash(f) == _file_hash(twin), f


def test_stage2_rerun_reproduces_checkpoint(tiny_run, tmp_path):
    cfg, run_dir = tiny_run
    import shutil

    other = tmp_path / "redo"
    shutil.copytree(run_dir / "data", other / "data")
    shutil.copytree(run_dir / "stage1", other / "stage1")
    run_stage2(cfg, other, use_dua=False)
    det_a = load_detector_checkpoint(run_dir / "stage2" / "detector_baseline.pt")
    det_b = load_detector_checkpoint(other / "stage2" / "detector_baseline.pt")
    for (name, a), b in zip(det_a.state_dict().items(), det_b.state_dict().values()):
        assert torch.equal(a, b), name
    log_a = (run_dir / "stage2" / "train_baseline.jsonl").read_bytes()
    log_b = (other / "stage2" / "train_baseline.jsonl").read_bytes()
    assert log_a == log_b


def test_baseline_log_has_no_distill_columns(tiny_run):
    _, run_dir = tiny_run
    rows = [
        json.loads(line)
        for line in (run_dir / "stage2" / "train_baseline.jsonl").read_text().splitlines()
    ]
    assert rows and all("L_dist" not in row and "L_cls_aux" not in row for row in rows)
    dua_rows = [
        json.loads(line)
        for line in (run_dir / "stage2" / "train_dua.jsonl").read_text().splitlines()
    ]
    assert dua_rows and all("L_dist" in row for row in dua_rows)


def test_eval_report_schema_and_theta(tiny_run):
    _, run_dir = tiny_run
    report = read_json(run_dir / "stage3" / "eval_baseline_raw.json")
    for key in ("variant", "mode", "seed", "ap_s", "ap_t", "theta", "theta_percent", "consistency"):
        assert key in report, key
    if not (np.isnan(report["theta"])):
        expected = abs(report["ap_s"] - report["ap_t"]) / (report["ap_s"] + report["ap_t"])
        assert report["theta"] == pytest.approx(expected, abs=1e-12)
    assert report["n_images"] == {"source": 2, "target": 2}


def test_dce_dump_carries_raw_and_refined_outputs(tiny_run):
    _, run_dir = tiny_run
    dump = read_json(run_dir / "stage3" / "dumps" / "baseline_dce.json")
    rows = dump["splits"]["target"]
    assert rows
    for row in rows:
        assert "outputs" in row and "outputs_raw" in row and "refined" in row
    report = read_json(run_dir / "stage3" / "eval_baseline_dce.json")
    assert "consistency_raw" in report
    plain = read_json(run_dir / "stage3" / "eval_baseline_raw.json")
    assert "consistency_raw" not in plain


def test_reports_regenerate_bit_identically(tiny_run):
    _, run_dir = tiny_run
    paths = sorted((run_dir / "stage3").glob("eval_*.json"))
    before = {p: p.read_bytes() for p in paths}
    regenerated = regenerate_reports(run_dir)
    assert sorted(regenerated) == paths
    for p in paths:
        assert p.read_bytes() == before[p], p


def test_write_run_report_outputs(tiny_run):
    _, run_dir = tiny_run
    report_dir = write_run_report(run_dir)
    summary = read_json(report_dir / "summary.json")
    assert set(summary["grid"]) == {"baseline", "+DUA", "+DCE", "+DUA+DCE"}
    for row in summary["grid"].values():
        assert set(row) == {"ap_s", "ap_t", "theta", "theta_percent", "src", "tau_b"}
    csv_text = (report_dir / "summary.csv").read_text().splitlines()
    assert csv_text[0] == "config,ap_s,ap_t,theta_percent,src,tau_b"
    # the csv keeps the ablation order even though json keys are sorted
    assert [line.split(",")[0] for line in csv_text[1:]] == [
        "baseline", "+DUA", "+DCE", "+DUA+DCE"
    ]
    assert (report_dir / "theta_bars.png").stat().st_size > 0
    curve_pngs = sorted(report_dir.glob("train_*_curves.png"))
    assert len(curve_pngs) == 2
    scatter_pngs = sorted(report_dir.glob("consistency_*.png"))
    assert len(scatter_pngs) == 2  # one per dce-mode cell


def test_aggregate_report_math(tiny_run, tmp_path):
    _, run_dir = tiny_run
    write_run_report(run_dir)
    base = read_json(run_dir / "report" / "summary.json")

    # clone the summary into two synthetic runs with shifted numbers
    runs = []
    for i, shift in enumerate((0.0, 0.06)):
        clone_dir = tmp_path / f"seed{i}"
        (clone_dir / "report").mkdir(parents=True)
        clone = json.loads(json.dumps(base))
        clone["run_dir"] = str(clone_dir)
        for row in clone["grid"].values():
            row["ap_s"] += shift
            row["ap_t"] += shift / 2
        (clone_dir / "report" / "summary.json").write_text(json.dumps(clone))
        runs.append(clone_dir)

    out_dir = write_aggregate_report(runs, tmp_path / "agg")
    aggregate = read_json(out_dir / "aggregate.json")
    for label, cell in aggregate["grid"].items():
        vals = [
            read_json(r / "report" / "summary.json")["grid"][label]["ap_s"] for r in runs
        ]
        assert cell["ap_s"]["mean"] == pytest.approx(statistics.fmean(vals))
        assert cell["ap_s"]["std"] == pytest.approx(statistics.stdev(vals))
        assert cell["ap_s"]["values"] == vals
    assert (out_dir / "aggregate.csv").exists()


# ---------------------------------------------------------------------------
# command-line interface
# ---------------------------------------------------------------------------

def test_cli_parser_covers_subcommands():
    parser = build_parser()
    args = parser.parse_args(["train-detector", "--use-dua", "--seed", "3"])
    assert args.command == "train-detector" and args.use_dua and args.seed == 3
    args = parser.parse_args(["evaluate", "--use-dce"])
    assert args.use_dce and not args.use_dua
    with pytest.raises(SystemExit):
        parser.parse_args(["unknown-cmd"])


def test_cli_full_chain(tmp_path, capsys):
    cfg = _tiny_config(seed=1)
    cfg_path = tmp_path / "tiny.ini"
    cfg.save(cfg_path)
    run_dir = tmp_path / "run"
    common = ["--config", str(cfg_path), "--run-dir", str(run_dir)]

    assert main(["gen-data", *common]) == 0
    assert (run_dir / "config.ini").exists()
    assert main(["train-teachers", *common]) == 0
    assert main(["train-detector", *common]) == 0
    assert main(["train-detector", "--use-dua", *common]) == 0
    assert main(["evaluate", *common]) == 0
    out = capsys.readouterr().out
    assert "variant=baseline mode=raw" in out and "theta=" in out
    assert main(["evaluate", "--use-dua", "--use-dce", *common]) == 0
    assert main(["report", *common]) == 0
    out = capsys.readouterr().out
    assert "report written to" in out
    assert (run_dir / "report" / "summary.csv").exists()
    assert (run_dir / "report" / "theta_bars.png").exists()


def test_cli_seed_override_changes_run_dir(tmp_path):
    cfg = _tiny_config()
    cfg.run.out_dir = str(tmp_path / "sweep")
    cfg_path = tmp_path / "cfg.ini"
    cfg.save(cfg_path)
    assert main(["gen-data", "--config", str(cfg_path), "--seed", "7"]) == 0
    assert (tmp_path / "sweep" / "seed7" / "data" / "manifest.json").exists()

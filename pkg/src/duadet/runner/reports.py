"""Metric reports and summary tables, recomputable from evaluation dumps."""
from __future__ import annotations

import csv
import math
import statistics
from pathlib import Path

import numpy as np

from ..metrics import ap50, sample_consistency_pairs, source_bias
from ..plots import save_consistency_scatter, save_loss_curves, save_theta_bars
from ..metrics import ConsistencyReport
from ..utils import read_json, read_jsonl, write_json

GRID_LABELS = {
    ("baseline", "raw"): "baseline",
    ("dua", "raw"): "+DUA",
    ("baseline", "dce"): "+DCE",
    ("dua", "dce"): "+DUA+DCE",
}


def _split_metrics(rows: list[dict], num_classes: int) -> tuple[float, dict]:
    detections, gts = [], []
    for image_id, row in enumerate(rows):
        for det in row["detections"]:
            det = dict(det)
            det["image_id"] = image_id
            detections.append(det)
        for box, label in zip(row["gt_boxes"], row["gt_labels"]):
            gts.append({"image_id": image_id, "box": box, "label": label})
    return ap50(detections, gts, num_classes)


def _split_consistency(rows: list[dict], key: str, n: int, seed: int, match_iou: float):
    outputs = [row[key] for row in rows]
    gt_boxes = [np.asarray(row["gt_boxes"], dtype=np.float64).reshape(-1, 4) for row in rows]
    return sample_consistency_pairs(outputs, gt_boxes, n=n, seed=seed, match_iou=match_iou)


def compute_report(dump: dict) -> dict:
    """All scalar metrics for one (variant, mode) evaluation dump.

    Pure function of the dump contents: rerunning it on the same file
    reproduces the report bit for bit.
    """
    num_classes = dump["num_classes"]
    ap_s, per_class_s = _split_metrics(dump["splits"]["source"], num_classes)
    ap_t, per_class_t = _split_metrics(dump["splits"]["target"], num_classes)
    report = {
        "variant": dump["variant"],
        "mode": dump["mode"],
        "seed": dump["seed"],
        "ap_s": ap_s,
        "ap_t": ap_t,
        "per_class_source": per_class_s,
        "per_class_target": per_class_t,
        "n_images": {k: len(v) for k, v in dump["splits"].items()},
    }
    try:
        bias = source_bias(ap_s, ap_t)
        report["theta"] = bias.theta
        report["theta_percent"] = bias.theta_percent
    except ValueError:
        report["theta"] = float("nan")
        report["theta_percent"] = float("nan")

    n = dump["consistency_n"]
    seed = dump["seed"]
    match_iou = dump["match_iou"]
    target_rows = dump["splits"]["target"]
    consistency = _split_consistency(target_rows, "outputs", n, seed, match_iou)
    report["consistency"] = consistency.to_dict()
    if target_rows and "outputs_raw" in target_rows[0]:
        raw = _split_consistency(target_rows, "outputs_raw", n, seed, match_iou)
        report["consistency_raw"] = raw.to_dict()
    return report


def regenerate_reports(run_dir: str | Path) -> list[Path]:
    """Recompute every eval report in run_dir/stage3 from its dump."""
    run_dir = Path(run_dir)
    out = []
    for dump_path in sorted((run_dir / "stage3" / "dumps").glob("*.json")):
        dump = read_json(dump_path)
        report = compute_report(dump)
        path = run_dir / "stage3" / f"eval_{dump['variant']}_{dump['mode']}.json"
        write_json(path, report)
        out.append(path)
    return out


def _consistency_from_dict(d: dict) -> ConsistencyReport:
    return ConsistencyReport(
        pairs=[(float(s), float(g)) for s, g in d["pairs"]],
        src=d["src"],
        tau_b=d["tau_b"],
        n_sampled=d["n_sampled"],
    )


def write_run_report(run_dir: str | Path) -> Path:
    """Assemble the ablation grid for one run; write CSV, JSON and figures."""
    run_dir = Path(run_dir)
    report_dir = run_dir / "report"
    eval_paths = regenerate_reports(run_dir)
    if not eval_paths:
        raise FileNotFoundError(f"no evaluation dumps under {run_dir / 'stage3'}")

    grid = {}
    for path in eval_paths:
        report = read_json(path)
        label = GRID_LABELS[(report["variant"], report["mode"])]
        grid[label] = report

    ordered = [label for label in GRID_LABELS.values() if label in grid]
    summary = {"run_dir": str(run_dir), "grid": {label: _row_of(grid[label]) for label in ordered}}
    write_json(report_dir / "summary.json", summary)

    with open(report_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config", "ap_s", "ap_t", "theta_percent", "src", "tau_b"])
        for label in ordered:
            row = summary["grid"][label]
            writer.writerow(
                [label, f"{row['ap_s']:.4f}", f"{row['ap_t']:.4f}",
                 f"{row['theta_percent']:.2f}", f"{row['src']:.4f}", f"{row['tau_b']:.4f}"]
            )

    save_theta_bars(
        {label: {"theta": summary["grid"][label]["theta"]} for label in ordered},
        report_dir / "theta_bars.png",
    )
    for label in ordered:
        report = grid[label]
        if "consistency_raw" in report:
            save_consistency_scatter(
                _consistency_from_dict(report["consistency_raw"]),
                _consistency_from_dict(report["consistency"]),
                report_dir / f"consistency_{label.replace('+', 'plus_')}.png",
            )
    for log in sorted((run_dir / "stage2").glob("train_*.jsonl")):
        history = read_jsonl(log)
        if history:
            keys = [k for k in ("L_DA", "L_det", "L_adv", "L_dist", "L_cls_aux") if k in history[0]]
            save_loss_curves(history, keys, report_dir / f"{log.stem}_curves.png")
    return report_dir


def _row_of(report: dict) -> dict:
    return {
        "ap_s": report["ap_s"],
        "ap_t": report["ap_t"],
        "theta": report["theta"],
        "theta_percent": report["theta_percent"],
        "src": report["consistency"]["src"],
        "tau_b": report["consistency"]["tau_b"],
    }


def write_aggregate_report(run_dirs: list[str | Path], out_dir: str | Path) -> Path:
    """Mean and standard deviation of every grid cell across seeds."""
    out_dir = Path(out_dir)
    summaries = []
    for run_dir in run_dirs:
        path = Path(run_dir) / "report" / "summary.json"
        if not path.exists():
            write_run_report(run_dir)
        summaries.append(read_json(path))

    labels = [label for label in GRID_LABELS.values() if all(label in s["grid"] for s in summaries)]
    metrics = ["ap_s", "ap_t", "theta", "theta_percent", "src", "tau_b"]
    aggregate = {"runs": [s["run_dir"] for s in summaries], "grid": {}}
    for label in labels:
        cell = {}
        for metric in metrics:
            values = [s["grid"][label][metric] for s in summaries]
            if any(v is None or math.isnan(v) for v in values):
                mean, std = float("nan"), float("nan")
            else:
                mean = statistics.fmean(values)
                std = statistics.stdev(values) if len(values) > 1 else 0.0
            cell[metric] = {"mean": mean, "std": std, "values": values}
        aggregate["grid"][label] = cell
    write_json(out_dir / "aggregate.json", aggregate)

    with open(out_dir / "aggregate.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")])
        for label in labels:
            row = [label]
            for metric in metrics:
                cell = aggregate["grid"][label][metric]
                row += [f"{cell['mean']:.4f}", f"{cell['std']:.4f}"]
            writer.writerow(row)
    return out_dir

"""Figure rendering for reports; every function writes a PNG and returns its path."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .metrics import ConsistencyReport  # noqa: E402


def _finish(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_consistency_scatter(
    raw: ConsistencyReport, refined: ConsistencyReport, path: str | Path
) -> Path:
    """Score vs gt-IoU scatter, raw and refined side by side."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 4), sharex=True, sharey=True)
    for ax, report, title in ((axes[0], raw, "raw"), (axes[1], refined, "refined")):
        if report.pairs:
            scores = [p[0] for p in report.pairs]
            locs = [p[1] for p in report.pairs]
            ax.scatter(scores, locs, s=12, alpha=0.6, edgecolors="none")
        ax.set_title(f"{title}: Src={report.src:.3f}, Tau-b={report.tau_b:.3f}")
        ax.set_xlabel("classification score")
        ax.set_ylabel("IoU to matched gt")
        ax.grid(alpha=0.3)
    return _finish(fig, path)


def save_loss_curves(history: list[dict], keys: list[str], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = [row["step"] for row in history]
    for key in keys:
        if any(key in row for row in history):
            ax.plot(steps, [row.get(key, float("nan")) for row in history], label=key, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    return _finish(fig, path)


def save_theta_bars(grid: dict[str, dict], path: str | Path) -> Path:
    """Bar chart of the source-bias percentage per configuration."""
    fig, ax = plt.subplots(figsize=(7, 4))
    names = list(grid)
    thetas = [100.0 * grid[name]["theta"] for name in names]
    ax.bar(range(len(names)), thetas, color="tab:blue")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel("source bias (%)")
    ax.grid(axis="y", alpha=0.3)
    return _finish(fig, path)


def save_pr_curves(per_class: dict[int, dict], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    for cls, data in sorted(per_class.items()):
        ax.plot(data["recall"], data["precision"], label=f"class {cls} (AP={data['ap']:.3f})", lw=1.2)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _finish(fig, path)

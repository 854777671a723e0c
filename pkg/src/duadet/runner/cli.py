"""Command-line entry point for the staged experiment pipeline."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig
from .reports import write_aggregate_report, write_run_report
from .stages import generate_datasets, run_stage1, run_stage2, run_stage3


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=str, default=None, help="INI config file")
    sub.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub.add_argument(
        "--run-dir", type=str, default=None,
        help="run directory (default: <out_dir>/seed<seed>)",
    )


def _resolve(args) -> tuple[ExperimentConfig, Path]:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.run.seed = args.seed
    run_dir = Path(args.run_dir) if args.run_dir else Path(cfg.run.out_dir) / f"seed{cfg.run.seed}"
    return cfg, run_dir


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="duadet",
        description=(
            "Domain-adaptive detection lab: synthetic two-domain data, teacher "
            "and localizer training, distillation-guided detector training, and "
            "consistency-refined evaluation."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset splits")
    _add_common(p)

    p = sub.add_parser("train-teachers", help="stage 1: classification teacher + localizer")
    _add_common(p)

    p = sub.add_parser("train-detector", help="stage 2: detector training")
    _add_common(p)
    p.add_argument("--use-dua", action="store_true", help="add the distillation terms")

    p = sub.add_parser("evaluate", help="stage 3: evaluate on both test splits")
    _add_common(p)
    p.add_argument("--use-dua", action="store_true", help="evaluate the distilled detector")
    p.add_argument("--use-dce", action="store_true", help="proposal swap + score refinement")

    p = sub.add_parser("report", help="summarize one run or aggregate several")
    _add_common(p)
    p.add_argument("--runs", nargs="*", default=None, help="run directories to aggregate")
    p.add_argument("--out", type=str, default=None, help="output directory for the aggregate")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    cfg, run_dir = _resolve(args)

    if args.command == "gen-data":
        cfg.save(run_dir / "config.ini")
        generate_datasets(cfg, run_dir)
    elif args.command == "train-teachers":
        run_stage1(cfg, run_dir)
    elif args.command == "train-detector":
        use_dua = args.use_dua or cfg.train.use_dua
        run_stage2(cfg, run_dir, use_dua=use_dua)
    elif args.command == "evaluate":
        use_dua = args.use_dua or cfg.train.use_dua
        use_dce = args.use_dce or cfg.eval.use_dce
        report = run_stage3(cfg, run_dir, use_dua=use_dua, use_dce=use_dce)
        print(
            f"variant={report['variant']} mode={report['mode']} "
            f"AP_s={report['ap_s']:.4f} AP_t={report['ap_t']:.4f} "
            f"theta={report['theta_percent']:.2f}%"
        )
    elif args.command == "report":
        if args.runs:
            out = write_aggregate_report(args.runs, args.out or "aggregate")
        else:
            out = write_run_report(run_dir)
        print(f"report written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Experiment orchestration: config, staged pipeline, reports, CLI."""
from .config import ExperimentConfig
from .stages import generate_datasets, run_stage1, run_stage2, run_stage3

__all__ = [
    "ExperimentConfig",
    "generate_datasets",
    "run_stage1",
    "run_stage2",
    "run_stage3",
]

"""Desk-scale domain-adaptive object detection lab.

A small, CPU-friendly implementation of an adversarially aligned two-stage
detector with a distillation-based de-biasing stage and a test-time
classification/localization consistency refinement, plus the measurement
suite (AP50, rank correlations, source-bias score) used to evaluate them.
"""

__version__ = "0.1.0"

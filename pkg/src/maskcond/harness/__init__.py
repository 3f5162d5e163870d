"""Experiment orchestration, checkpoints and the command-line interface."""

from .checkpoint import load_checkpoint, save_checkpoint
from .experiments import SweepResult, compare_schedules, eval_mse_vs_sparsity, sweep_dataset_size

__all__ = [
    "save_checkpoint",
    "load_checkpoint",
    "SweepResult",
    "eval_mse_vs_sparsity",
    "sweep_dataset_size",
    "compare_schedules",
]

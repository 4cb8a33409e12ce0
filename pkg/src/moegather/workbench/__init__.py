"""Experiment harness: synthetic tasks, checkpoints, configs, pipeline, CLI."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, default_config, load_config
from .data import Dataset, SyntheticTaskSpec, generate_dataset
from .pipeline import run_pipeline

__all__ = [
    "Dataset",
    "ExperimentConfig",
    "SyntheticTaskSpec",
    "default_config",
    "generate_dataset",
    "load_checkpoint",
    "load_config",
    "run_pipeline",
    "save_checkpoint",
]

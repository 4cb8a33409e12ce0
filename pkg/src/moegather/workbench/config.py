"""Experiment configuration: JSON in, validated dataclasses out.

A config bundles the teacher architecture, the synthetic task, training
settings for the teach and distill stages, and the gathering choices. Two
named profiles ship with the package: ``vision`` (alpha 0.25, T 1.0, SVD
ratio 0.75) and ``nlp`` (alpha 0.75, T 1.0, SVD ratio 0.25). The environment
variable ``ONES_SEED`` overrides the config seed at load time.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from ..gather import GATHER_METHODS, GatherConfig
from ..model import Architecture
from ..training import DistillConfig, TrainConfig
from .data import SyntheticTaskSpec

SEED_ENV_VAR = "ONES_SEED"

PROFILES = {
    "vision": {"alpha": 0.25, "temperature": 1.0, "svd_ratio": 0.75},
    "nlp": {"alpha": 0.75, "temperature": 1.0, "svd_ratio": 0.25},
}


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class ExperimentConfig:
    arch: Architecture
    task: SyntheticTaskSpec
    teach: TrainConfig
    distill: DistillConfig
    gather_methods: list[str] = field(default_factory=lambda: list(GATHER_METHODS))
    svd_ratio: float = 0.75
    bias_policy: str = "average"
    out_dir: str = "runs/out"
    seed: int = 0

    def __post_init__(self):
        if self.arch.stage != "moe":
            raise ConfigError("the teacher architecture must use an MoE stage")
        for m in self.gather_methods:
            if m not in GATHER_METHODS:
                raise ConfigError(f"unknown gather method {m!r}")
        if not self.gather_methods:
            raise ConfigError("at least one gather method is required")
        if self.task.d_model != self.arch.d_model:
            raise ConfigError(
                f"task d_model {self.task.d_model} != model d_model {self.arch.d_model}"
            )
        if self.task.seq_len != self.arch.seq_len:
            raise ConfigError(
                f"task seq_len {self.task.seq_len} != model seq_len {self.arch.seq_len}"
            )
        if self.task.num_classes != self.arch.num_classes:
            raise ConfigError(
                f"task num_classes {self.task.num_classes} != model head width {self.arch.num_classes}"
            )
        if "topkg" in self.gather_methods and self.arch.d_ff % self.arch.num_experts:
            raise ConfigError(
                f"topkg needs d_ff ({self.arch.d_ff}) divisible by the expert count "
                f"({self.arch.num_experts})"
            )
        # fail early on bad gathering settings rather than mid-pipeline
        for m in self.gather_methods:
            self.gather_config(m)

    def gather_config(self, method: str) -> GatherConfig:
        return GatherConfig(
            method=method,
            svd_ratio=self.svd_ratio if method == "svdkg" else None,
            bias_policy=self.bias_policy if method == "topkg" else "average",
            seed=derive_seed(self.seed, f"gather-{method}"),
        )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "model": self.arch.to_dict(),
            "task": self.task.to_dict(),
            "teach": vars(self.teach).copy(),
            "distill": vars(self.distill).copy(),
            "gather": {
                "methods": list(self.gather_methods),
                "svd_ratio": self.svd_ratio,
                "bias_policy": self.bias_policy,
            },
        }


def derive_seed(seed: int, tag: str) -> int:
    from ..numerics import Rng

    return Rng(seed).derive(tag).seed


def default_config(seed: int = 0, out_dir: str = "runs/out", profile: str = "vision") -> ExperimentConfig:
    """Desk-scale defaults: d_model 32, d_ff 128, 4 experts with top-2
    routing, two parameter-shared blocks, ~20k training sequences."""
    cfg = {
        "seed": seed,
        "out_dir": out_dir,
        "profile": profile,
        "model": {
            "d_model": 32,
            "d_ff": 128,
            "seq_len": 8,
            "num_classes": 8,
            "num_blocks": 2,
            "parameter_sharing": True,
            "activation": "gelu",
            "stage": "moe",
            "num_experts": 4,
            "top_k": 2,
        },
        "task": {
            "kind": "gaussian_mixture",
            "num_classes": 8,
            "d_model": 32,
            "seq_len": 8,
            "train_size": 20000,
            "test_size": 2000,
            "modes_per_class": 4,
        },
        "teach": {"steps": 1500, "batch_size": 64, "learning_rate": 3e-3},
        "distill": {"steps": 700, "batch_size": 64, "learning_rate": 1e-3},
    }
    return config_from_dict(cfg)


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = json.loads(json.dumps(raw))  # deep copy + reject non-JSON values
    seed = int(os.environ.get(SEED_ENV_VAR, raw.get("seed", 0)))
    profile_name = raw.get("profile")
    profile = {}
    if profile_name is not None:
        if profile_name not in PROFILES:
            raise ConfigError(f"unknown profile {profile_name!r}; available: {sorted(PROFILES)}")
        profile = PROFILES[profile_name]

    model_d = dict(raw.get("model", {}))
    model_d.setdefault("stage", "moe")
    try:
        arch = Architecture.from_dict(model_d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad model block: {exc}") from exc

    task_d = dict(raw.get("task", {}))
    task_d.setdefault("seed", derive_seed(seed, "task"))
    try:
        task = SyntheticTaskSpec.from_dict(task_d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad task block: {exc}") from exc

    teach_d = dict(raw.get("teach", {}))
    teach_d.setdefault("seed", derive_seed(seed, "teach"))
    distill_d = dict(raw.get("distill", {}))
    distill_d.setdefault("seed", derive_seed(seed, "distill"))
    distill_d.setdefault("alpha", profile.get("alpha", 0.25))
    distill_d.setdefault("temperature", profile.get("temperature", 1.0))

    gather_d = dict(raw.get("gather", {}))
    try:
        teach = TrainConfig(**teach_d)
        distill = DistillConfig(**distill_d)
        return ExperimentConfig(
            arch=arch,
            task=task,
            teach=teach,
            distill=distill,
            gather_methods=list(gather_d.get("methods", GATHER_METHODS)),
            svd_ratio=float(gather_d.get("svd_ratio", profile.get("svd_ratio", 0.75))),
            bias_policy=gather_d.get("bias_policy", "average"),
            out_dir=raw.get("out_dir", "runs/out"),
            seed=seed,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top-level JSON value must be an object")
    return config_from_dict(raw)

"""End-to-end experiment pipeline.

Stages: generate data, train the MoE teacher, train a dense-from-scratch
baseline, gather a student per requested method, distill every student (plus
two reference initializations), evaluate everything, and emit a summary.

The two reference initializations isolate what gathering contributes:

* ``random_init_kd``   - fully random student, distilled (init carries nothing)
* ``matched_copy_kd``  - matched layers copied from the teacher, feed-forward
                         stage left random, then distilled

Every artifact lands in the config's output directory; a stage failure
aborts with the stage name but keeps whatever was already written.
"""

from __future__ import annotations

import csv
import json
from importlib import resources
from pathlib import Path

import jsonschema

from ..gather import build_student, copy_matched
from ..metrics import Scoreboard, UndefinedMetricError, flops_per_token, moe_benefits
from ..model import build_classifier, count_parameters
from ..numerics import Rng
from ..training import (
    DistillConfig,
    TrainResult,
    distill_student,
    evaluate_accuracy,
    train_classifier,
)
from .checkpoint import file_sha256, save_checkpoint
from .config import ExperimentConfig, derive_seed
from .data import generate_dataset

TRAINING_LOG_COLUMNS = ["step", "main", "distill", "balance", "total", "lr", "heldout_acc"]
SUMMARY_CSV_COLUMNS = ["variant", "seed", "accuracy", "benefits"]


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _load_schema(name: str) -> dict:
    with resources.files("moegather.schemas").joinpath(name).open() as fh:
        return json.load(fh)


def _check_csv_columns(kind: str, columns: list[str]) -> None:
    declared = _load_schema("csv_columns.json")[kind]
    if columns != declared:
        raise ValueError(f"{kind} columns {columns} do not match the declared schema {declared}")


def write_training_log(rows: list[dict], path) -> None:
    _check_csv_columns("training_log", TRAINING_LOG_COLUMNS)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRAINING_LOG_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def validate_summary(summary: dict) -> None:
    jsonschema.validate(summary, _load_schema("summary.schema.json"))


class _StageRunner:
    def __init__(self):
        self.current = None

    def run(self, name: str, fn):
        self.current = name
        try:
            return fn()
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(name, exc) from exc


def run_pipeline(cfg: ExperimentConfig) -> dict:
    """Execute the full experiment; returns the summary dict and writes
    checkpoints, logs, gather reports, summary.json and summary.csv."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stages = _StageRunner()

    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    data = stages.run("data", lambda: generate_dataset(cfg.task))
    train, test = data

    def teach():
        model = build_classifier(cfg.arch, Rng(cfg.teach.seed).derive("init"))
        result = train_classifier(model, cfg.teach, data)
        meta = {
            "task": cfg.task.to_dict(),
            "training": vars(cfg.teach).copy(),
            "seed": cfg.seed,
            "role": "teacher",
        }
        save_checkpoint(result.model, meta, out / "teacher.ckpt")
        write_training_log(result.log, out / "teacher.log.csv")
        return result

    teacher_result = stages.run("teach", teach)
    teacher = teacher_result.model
    teacher_hash = file_sha256(out / "teacher.ckpt")

    # the dense baseline gets a training budget comparable to teach + distill
    def dense_scratch():
        arch = cfg.arch.dense_twin()
        settings = vars(cfg.teach).copy()
        settings["steps"] = cfg.teach.steps + cfg.distill.steps
        settings["seed"] = derive_seed(cfg.seed, "dense-scratch")
        from ..training import TrainConfig

        tc = TrainConfig(**settings)
        model = build_classifier(arch, Rng(tc.seed).derive("init"))
        result = train_classifier(model, tc, data)
        meta = {"task": cfg.task.to_dict(), "training": settings, "seed": cfg.seed, "role": "dense_scratch"}
        save_checkpoint(result.model, meta, out / "dense_scratch.ckpt")
        write_training_log(result.log, out / "dense_scratch.log.csv")
        return result

    dense_result = stages.run("dense-scratch", dense_scratch)

    students: dict[str, dict] = {}

    def make_reference_inits():
        dense_arch = cfg.arch.dense_twin()
        random_student = build_classifier(dense_arch, Rng(derive_seed(cfg.seed, "random-init")))
        copy_student = build_classifier(dense_arch, Rng(derive_seed(cfg.seed, "copy-init")))
        copy_matched(teacher, copy_student)
        for name, student in (("random_init_kd", random_student), ("matched_copy_kd", copy_student)):
            init_path = out / f"{name}.init.ckpt"
            save_checkpoint(student, {"task": cfg.task.to_dict(), "seed": cfg.seed, "role": name}, init_path)
            students[name] = {"model": student, "init": init_path, "report": None}

    stages.run("reference-inits", make_reference_inits)

    def gather_all():
        for method in cfg.gather_methods:
            gcfg = cfg.gather_config(method)
            student, report = build_student(teacher, gcfg)
            name = f"gather_{method}"
            init_path = out / f"{name}.init.ckpt"
            report_path = out / f"{name}.report.json"
            meta = {
                "task": cfg.task.to_dict(),
                "seed": cfg.seed,
                "role": name,
                "gather": {**gcfg.to_dict(), "report": report.to_dict()},
            }
            save_checkpoint(student, meta, init_path)
            report_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
            students[name] = {"model": student, "init": init_path, "report": report_path}

    stages.run("gather", gather_all)

    def distill_all():
        for name, entry in students.items():
            settings = vars(cfg.distill).copy()
            settings["seed"] = derive_seed(cfg.seed, f"distill-{name}")
            dcfg = DistillConfig(**settings)
            result = distill_student(entry["model"], teacher, dcfg, data)
            meta = {
                "task": cfg.task.to_dict(),
                "training": settings,
                "seed": cfg.seed,
                "role": name,
                "initialized_from": entry["init"].name,
            }
            save_checkpoint(result.model, meta, out / f"{name}.ckpt")
            write_training_log(result.log, out / f"{name}.log.csv")
            entry["result"] = result

    stages.run("distill", distill_all)

    def evaluate():
        teacher_acc = teacher_result.final_heldout_acc
        dense_acc = dense_result.final_heldout_acc
        teacher_stage = teacher.blocks[0].stage
        dense_stage = dense_result.model.blocks[0].stage
        variants = [
            {
                "variant": "dense_scratch",
                "seed": cfg.seed,
                "accuracy": dense_acc,
                "benefits": 0.0,
                "checkpoint": "dense_scratch.ckpt",
                "init_checkpoint": None,
                "gather_report": None,
                "flops_per_token": flops_per_token(dense_stage),
                "parameters": count_parameters(dense_result.model),
            }
        ]
        for name, entry in students.items():
            result: TrainResult = entry["result"]
            acc = result.final_heldout_acc
            try:
                benefits = moe_benefits(Scoreboard(acc, dense_acc, teacher_acc))
            except UndefinedMetricError:
                benefits = None
            variants.append(
                {
                    "variant": name,
                    "seed": cfg.seed,
                    "accuracy": acc,
                    "benefits": benefits,
                    "checkpoint": f"{name}.ckpt",
                    "init_checkpoint": entry["init"].name,
                    "gather_report": entry["report"].name if entry["report"] else None,
                    "flops_per_token": flops_per_token(result.model.blocks[0].stage),
                    "parameters": count_parameters(result.model),
                }
            )
        summary = {
            "seed": cfg.seed,
            "config": cfg.to_dict(),
            "teacher": {
                "accuracy": teacher_acc,
                "final_balance": teacher_result.final_balance or 0.0,
                "checkpoint": "teacher.ckpt",
                "flops_per_token": flops_per_token(teacher_stage),
                "parameters": count_parameters(teacher),
            },
            "teacher_sha256": teacher_hash,
            "teacher_sha256_final": file_sha256(out / "teacher.ckpt"),
            "variants": variants,
        }
        validate_summary(summary)
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        _check_csv_columns("summary", SUMMARY_CSV_COLUMNS)
        with open(out / "summary.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(SUMMARY_CSV_COLUMNS)
            for row in variants:
                writer.writerow([row["variant"], row["seed"], row["accuracy"], row["benefits"]])
        return summary

    return stages.run("evaluate", evaluate)

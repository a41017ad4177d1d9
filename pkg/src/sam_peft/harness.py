"""
Experiment orchestration: training with early stopping, evaluation over the task set,
ablation sweeps, exports and the parameter / memory reports printed by the CLI.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Literal, Self, get_args

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from tqdm import tqdm

from .checkpoint import Checkpoint, load_checkpoint, load_state, save_checkpoint, snapshot
from .config import get_settings, parse_model
from .efficiency import MemoryReport, count_params, memory_report, probe_prompts
from .errors import ConfigError, DataError, NumericalError, SamPeftError
from .instanceseg import dice, mean_segmentation_accuracy, watershed_decode
from .interactive import (
    InteractiveResult,
    TrainConfig,
    evaluate_interactive,
    interactive_training_step,
    sample_initial_prompt,
)
from .optim import Adam
from .peft import QLORA_METHODS, PeftConfig, apply_peft, export_qlora, merge_lora_into
from .samlite import COUNT_ONLY_PRESETS, InstanceHeadOutput, PromptableModel, SamLite, build_model
from .suggest import unknown_choice_message
from .synth import DatasetManifest, Sample, load, read_manifest
from .tensor import Tensor, no_grad
from .vit import VIT_PRESETS

logger = logging.getLogger(__name__)

Task = Literal["ais", "point", "box", "ip", "ib"]
TASKS: tuple[str, ...] = get_args(Task)
_START: dict[str, Literal["point", "box"]] = {"point": "point", "ip": "point", "box": "box", "ib": "box"}

CSV_COLUMNS = ("experiment", "method", "seed", "task", "value", "params_trainable", "act_bytes")

# Encoder-side trainable deltas for the ViT-B-shaped preset, as published.
REFERENCE_ENCODER_DELTAS: dict[str, float] = {
    "full_ft": 89.6e6,
    "freeze_encoder": 0.0,
    "attn_tune": 28.4e6,
    "late_ft": 42.5e6,
    "lora": 1_179_648,
    "late_lora": 2.36e6,
    "ssf": 0.22e6,
    "bias_tune": 0.1e6,
    "ln_tune": 0.037e6,
    "adaptformer": 1.19e6,
}


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    experiment_id: str = "run"
    preset: str = "toy"
    peft: PeftConfig
    train: TrainConfig = TrainConfig()
    data: str | None = None
    tasks: tuple[Task, ...] = ("point", "box", "ip", "ib")
    seed: int = 0
    n_train: int | None = None

    @field_validator("preset")
    @classmethod
    def _known_preset(cls, value: str) -> str:
        if value not in VIT_PRESETS:
            raise ValueError(unknown_choice_message("preset", value, VIT_PRESETS))
        return value

    @model_validator(mode="after")
    def _check(self) -> Self:
        if not self.tasks:
            raise ValueError("at least one task is needed")
        if len(set(self.tasks)) != len(self.tasks):
            raise ValueError(f"duplicate tasks in {self.tasks}")
        if self.n_train is not None and self.n_train <= 0:
            raise ValueError("n_train must be positive")
        return self

    @property
    def train_instance_head(self) -> bool:
        return "ais" in self.tasks

    def echo(self) -> dict[str, Any]:
        return self.model_dump(mode="json")


def _adapter_rng(config: ExperimentConfig) -> np.random.Generator:
    return np.random.default_rng([config.seed, 1])


def build_experiment_model(config: ExperimentConfig, *, materialize: bool | None = None) -> SamLite:
    model = build_model(config.preset, seed=config.seed, materialize=materialize)
    apply_peft(model, config.peft, rng=_adapter_rng(config))
    return model


def restore_model(ckpt: Checkpoint) -> tuple[SamLite, ExperimentConfig]:
    config = parse_model(ExperimentConfig, ckpt.config)
    model = build_experiment_model(config)
    load_state(model, ckpt.tensors)
    return model, config


def base_checkpoint_path(ckpt: Path) -> Path:
    return ckpt.with_name(ckpt.name + ".base.ckpt")


def log_path(ckpt: Path) -> Path:
    return ckpt.with_name(ckpt.name + ".log.jsonl")


def _check_tasks(tasks: Sequence[str], manifest: DatasetManifest, data_dir: Path) -> None:
    if "ais" in tasks and manifest.task != "instance":
        raise ConfigError(f"task ais needs instance data, but {data_dir} holds {manifest.task} data")


def _data_dir(config: ExperimentConfig) -> Path:
    if config.data is None:
        raise ConfigError("no dataset given (--data)")
    return Path(config.data)


def _progress(progress: bool | None) -> bool:
    return get_settings().progress if progress is None else progress


# --- training ---


@dataclass
class EarlyStopping:
    patience: int
    tolerance: float = 1e-4
    best: float = -math.inf
    best_epoch: int = 0
    stale: int = 0

    def update(self, epoch: int, score: float) -> bool:
        if score > self.best + self.tolerance:
            self.best, self.best_epoch, self.stale = score, epoch, 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


@dataclass(frozen=True)
class TrainResult:
    checkpoint: Path
    log: Path
    epochs_run: int
    stop_reason: Literal["patience", "max_epochs"]
    best_epoch: int
    best_score: float


ValidationFn = Callable[[PromptableModel, Sequence[Sample], ExperimentConfig], float]


def ais_score(model: PromptableModel, sample: Sample) -> float:
    with no_grad():
        maps = model.predict_instances(model.encode(sample.image)).data
    return mean_segmentation_accuracy(watershed_decode(InstanceHeadOutput.from_array(maps)), sample.instances)


def validation_score(model: PromptableModel, samples: Sequence[Sample], config: ExperimentConfig) -> float:
    """Mean box-prompt Dice before any correction, averaged with AIS mSA when the head is trained."""
    was_training = model.training
    if isinstance(model, SamLite):
        model.eval()
    rng = np.random.default_rng(config.seed)
    scores: list[float] = []
    try:
        with no_grad():
            for sample in samples:
                features = model.encode(sample.image)
                for obj in sample.object_ids:
                    truth = sample.instances == obj
                    prompts = sample_initial_prompt(truth, "box", "eval", rng)
                    scores.append(dice(model.predict_mask(features, prompts).data > 0, truth))
        score = float(np.mean(scores)) if scores else 0.0
        if config.train_instance_head and samples:
            score = 0.5 * (score + float(np.mean([ais_score(model, s) for s in samples])))
    finally:
        if isinstance(model, SamLite):
            model.train(was_training)
    return score


def _training_model(config: ExperimentConfig, out: Path) -> SamLite:
    """Build the seeded model, keep the full-precision base for QLoRA, then adapt it."""
    if config.preset in COUNT_ONLY_PRESETS:
        raise ConfigError(f"preset {config.preset} is count-only; train on the toy preset")
    model = build_model(config.preset, seed=config.seed)
    if config.peft.method in QLORA_METHODS:
        base_config = config.model_copy(update={"peft": PeftConfig.create(method="full_ft")})
        save_checkpoint(base_checkpoint_path(out), Checkpoint.from_model(model, base_config.echo(), {"role": "base"}))
    apply_peft(model, config.peft, rng=_adapter_rng(config))
    return model


def write_initial_checkpoint(config: ExperimentConfig, out: Path) -> Path:
    """The checkpoint a run starts from, before any optimizer step."""
    model = _training_model(config, out)
    return save_checkpoint(out, Checkpoint.from_model(model, config.echo(), {"epochs_run": 0, "stop_reason": "init"}))


def _finite_or_none(value: float) -> float | None:
    return value if math.isfinite(value) else None


def train(
    config: ExperimentConfig,
    out: Path,
    *,
    validation: ValidationFn = validation_score,
    progress: bool | None = None,
) -> TrainResult:
    data_dir = _data_dir(config)
    manifest = read_manifest(data_dir)
    _check_tasks(config.tasks, manifest, data_dir)
    vit = VIT_PRESETS[config.preset]
    if manifest.image_size != vit.image_size or manifest.in_channels != vit.in_channels:
        raise ConfigError(
            f"{data_dir} holds {manifest.image_size}px {manifest.in_channels}-channel images; "
            f"preset {config.preset} expects {vit.image_size}px {vit.in_channels}-channel"
        )
    train_samples = load(data_dir, "train", limit=config.n_train)
    if not train_samples:
        raise DataError(f"{data_dir}: the train split is empty")
    val_samples = load(data_dir, "val")
    if not val_samples:
        logger.warning("%s has no validation images; scoring on the train split", data_dir)
        val_samples = train_samples

    model = _training_model(config, out)
    tc = config.train
    optimizer = Adam(model.parameters(), lr=tc.lr)
    rng = np.random.default_rng([config.seed, 2])
    stopper = EarlyStopping(tc.early_stop_patience, tc.early_stop_tolerance)
    best_state = last_good = snapshot(model)
    stop_reason: Literal["patience", "max_epochs"] = "max_epochs"
    epoch = 0
    log_file = log_path(out)
    log_file.parent.mkdir(parents=True, exist_ok=True)

    with log_file.open("w", encoding="utf-8") as log:
        epochs = tqdm(range(1, tc.max_epochs + 1), desc=config.experiment_id, disable=not _progress(progress))
        for epoch in epochs:
            order = rng.permutation(len(train_samples))
            losses: list[float] = []
            model.train()
            try:
                for start in range(0, len(order), tc.batch_size):
                    batch = [train_samples[i] for i in order[start : start + tc.batch_size]]
                    losses.append(
                        interactive_training_step(
                            model, batch, tc, optimizer, rng, train_instance_head=config.train_instance_head
                        )
                    )
            except NumericalError:
                load_state(model, last_good)
                meta = {"epochs_run": epoch - 1, "stop_reason": "nan", "best_epoch": stopper.best_epoch}
                save_checkpoint(out, Checkpoint.from_model(model, config.echo(), meta))
                logger.error("non-finite loss in epoch %d; kept the state after epoch %d", epoch, epoch - 1)
                raise
            loss = float(np.mean(losses))
            score = validation(model, val_samples, config)
            improved = stopper.update(epoch, score)
            if improved:
                best_state = snapshot(model)
            last_good = snapshot(model)
            record = {"epoch": epoch, "loss": loss, "val_score": score, "best": stopper.best, "improved": improved}
            log.write(json.dumps(record) + "\n")
            log.flush()
            epochs.set_postfix(loss=f"{loss:.4f}", val=f"{score:.4f}")
            if stopper.should_stop:
                stop_reason = "patience"
                break

    load_state(model, best_state)
    meta = {
        "epochs_run": epoch,
        "stop_reason": stop_reason,
        "best_epoch": stopper.best_epoch,
        "best_score": _finite_or_none(stopper.best),
    }
    save_checkpoint(out, Checkpoint.from_model(model, config.echo(), meta))
    logger.info("%s stopped after %d epochs (%s); best epoch %d", config.experiment_id, epoch, stop_reason, stopper.best_epoch)
    return TrainResult(out, log_file, epoch, stop_reason, stopper.best_epoch, stopper.best)


# --- evaluation ---


@dataclass(frozen=True)
class RecordContext:
    """What every result record echoes about the run that produced it."""

    experiment: str
    method: str
    seed: int
    params_trainable: int
    act_bytes: int
    epochs_run: int | None = None
    stop_reason: str | None = None
    config: dict[str, Any] = field(default_factory=lambda: {})


@dataclass(frozen=True)
class ResultRecord:
    experiment: str
    method: str
    seed: int
    task: str
    value: float
    params_trainable: int
    act_bytes: int
    image_id: str | None = None
    per_iteration: tuple[float, ...] | None = None
    epochs_run: int | None = None
    stop_reason: str | None = None

    @classmethod
    def make(
        cls,
        ctx: RecordContext,
        task: str,
        value: float,
        *,
        image_id: str | None = None,
        per_iteration: tuple[float, ...] | None = None,
    ) -> ResultRecord:
        return cls(
            ctx.experiment,
            ctx.method,
            ctx.seed,
            task,
            value,
            ctx.params_trainable,
            ctx.act_bytes,
            image_id,
            per_iteration,
            ctx.epochs_run,
            ctx.stop_reason,
        )

    def csv_row(self) -> dict[str, Any]:
        return {column: getattr(self, column) for column in CSV_COLUMNS}


@dataclass(frozen=True)
class ObjectRecord:
    experiment: str
    start: str
    image_id: str
    object_id: int
    metrics: tuple[float, ...]


@dataclass
class Evaluation:
    context: RecordContext
    records: list[ResultRecord] = field(default_factory=lambda: [])
    objects: list[ObjectRecord] = field(default_factory=lambda: [])

    def aggregates(self) -> dict[str, float]:
        """Per task, the mean over images of the per-image value."""
        by_task: dict[str, list[float]] = {}
        for r in self.records:
            by_task.setdefault(r.task, []).append(r.value)
        return {task: float(np.mean(values)) for task, values in by_task.items()}

    def summary(self) -> list[ResultRecord]:
        return [ResultRecord.make(self.context, task, value) for task, value in self.aggregates().items()]


def _image_records(
    ctx: RecordContext, task: str, result: InteractiveResult, samples: Sequence[Sample]
) -> list[ResultRecord]:
    traces: dict[str, list[list[float]]] = {}
    for trace in result.traces:
        traces.setdefault(trace.image_id, []).append(trace.metrics)
    final = task in ("ip", "ib")
    records: list[ResultRecord] = []
    for sample in samples:
        rows = traces.get(sample.image_id)
        if not rows:
            logger.warning("image %s has no objects; no %s record", sample.image_id, task)
            continue
        per_iteration = tuple(float(v) for v in np.mean(np.asarray(rows), axis=0))
        value = per_iteration[-1] if final else per_iteration[0]
        records.append(ResultRecord.make(ctx, task, value, image_id=sample.image_id, per_iteration=per_iteration))
    return records


def evaluate_model(
    model: PromptableModel,
    samples: Sequence[Sample],
    tasks: Sequence[str],
    context: RecordContext,
    *,
    metric: Literal["msa", "dice"] = "msa",
    iterations: int = 7,
    progress: bool | None = None,
) -> Evaluation:
    if not samples:
        raise DataError("no images to evaluate")
    unknown = [t for t in tasks if t not in TASKS]
    if unknown:
        raise ConfigError(unknown_choice_message("task", unknown[0], TASKS))
    evaluation = Evaluation(context)
    interactive: dict[str, InteractiveResult] = {}
    for start in dict.fromkeys(_START[t] for t in tasks if t != "ais"):
        result = evaluate_interactive(model, samples, start, metric=metric, seed=context.seed, iterations=iterations)
        interactive[start] = result
        evaluation.objects.extend(
            ObjectRecord(context.experiment, start, t.image_id, t.object_id, tuple(t.metrics)) for t in result.traces
        )
    for task in tasks:
        if task == "ais":
            was_training = model.training
            if isinstance(model, SamLite):
                model.eval()
            for sample in tqdm(samples, desc="ais", disable=not _progress(progress)):
                evaluation.records.append(
                    ResultRecord.make(context, task, ais_score(model, sample), image_id=sample.image_id)
                )
            if isinstance(model, SamLite):
                model.train(was_training)
        else:
            evaluation.records.extend(_image_records(context, task, interactive[_START[task]], samples))
    return evaluation


def evaluate(
    ckpt_path: Path,
    data_dir: Path,
    tasks: Sequence[str],
    *,
    iterations: int = 7,
    seed: int = 0,
    split: str = "test",
    progress: bool | None = None,
) -> Evaluation:
    ckpt = load_checkpoint(ckpt_path)
    model, config = restore_model(ckpt)
    manifest = read_manifest(data_dir)
    _check_tasks(tasks, manifest, data_dir)
    samples = load(data_dir, split)
    context = RecordContext(
        experiment=config.experiment_id,
        method=config.peft.method,
        seed=seed,
        params_trainable=count_params(model).trainable_params,
        act_bytes=memory_report(model, with_instance_head=config.train_instance_head).retained_activation_bytes,
        epochs_run=ckpt.meta.get("epochs_run"),
        stop_reason=ckpt.meta.get("stop_reason"),
        config=config.echo(),
    )
    return evaluate_model(
        model, samples, tasks, context, metric=manifest.metric, iterations=iterations, progress=progress
    )


def write_jsonl(path: Path, evaluation: Evaluation) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in evaluation.records:
            fh.write(json.dumps({"kind": "image", **asdict(record)}) + "\n")
        for record in evaluation.summary():
            fh.write(json.dumps({"kind": "aggregate", **asdict(record), "config": evaluation.context.config}) + "\n")
        for obj in evaluation.objects:
            fh.write(json.dumps({"kind": "object", **asdict(obj)}) + "\n")
    return path


def write_csv(path: Path, records: Sequence[ResultRecord]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for record in records:
            writer.writerow(record.csv_row())
    return path


# --- sweeps ---

_PEFT_FLAGS = frozenset(PeftConfig.model_fields)
_TRAIN_FLAGS = {
    "batch_size": "batch_size",
    "objects_per_image": "objects_per_image",
    "correction_iterations": "correction_iterations",
    "lr": "lr",
    "patience": "early_stop_patience",
    "tolerance": "early_stop_tolerance",
    "max_epochs": "max_epochs",
}
_TOP_FLAGS = frozenset({"preset", "seed", "n_train", "tasks"})
SWEEP_FLAGS = tuple(sorted(_PEFT_FLAGS | set(_TRAIN_FLAGS) | _TOP_FLAGS))


def read_grid(path: Path) -> dict[str, list[Any]]:
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"missing grid file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: a grid is a JSON object mapping flag names to value lists")
    return normalise_grid(raw)  # pyright: ignore[reportUnknownArgumentType]


def normalise_grid(grid: Mapping[str, Any]) -> dict[str, list[Any]]:
    out: dict[str, list[Any]] = {}
    for key, values in grid.items():
        if key not in SWEEP_FLAGS:
            raise ConfigError(unknown_choice_message("sweep flag", key, SWEEP_FLAGS))
        out[key] = list(values) if isinstance(values, list) else [values]  # pyright: ignore[reportUnknownArgumentType]
        if not out[key]:
            raise ConfigError(f"sweep flag {key} has no values")
    return out


def expand_grid(grid: Mapping[str, list[Any]]) -> list[dict[str, Any]]:
    keys = list(grid)
    return [dict(zip(keys, combo, strict=True)) for combo in itertools.product(*(grid[k] for k in keys))]


def experiment_from_flags(flags: Mapping[str, Any], *, data: Path | None, experiment_id: str) -> ExperimentConfig:
    peft = {k: v for k, v in flags.items() if k in _PEFT_FLAGS}
    peft.setdefault("method", "lora")
    train_cfg = {_TRAIN_FLAGS[k]: v for k, v in flags.items() if k in _TRAIN_FLAGS}
    top = {k: v for k, v in flags.items() if k in _TOP_FLAGS}
    return parse_model(
        ExperimentConfig,
        {
            "experiment_id": experiment_id,
            "peft": parse_model(PeftConfig, peft),
            "train": parse_model(TrainConfig, train_cfg),
            "data": None if data is None else str(data),
            **top,
        },
    )


@dataclass(frozen=True)
class RunOutcome:
    metrics: dict[str, float]
    act_bytes: int
    epochs_run: int | None = None
    stop_reason: str | None = None


Runner = Callable[[ExperimentConfig, Path], RunOutcome]


def run_experiment(config: ExperimentConfig, out_dir: Path) -> RunOutcome:
    """Train, then evaluate on the test split."""
    ckpt = out_dir / f"{config.experiment_id}.ckpt"
    result = train(config, ckpt, progress=False)
    evaluation = evaluate(ckpt, _data_dir(config), config.tasks, seed=config.seed, progress=False)
    return RunOutcome(evaluation.aggregates(), evaluation.context.act_bytes, result.epochs_run, result.stop_reason)


@dataclass(frozen=True)
class SweepRow:
    experiment: str
    flags: dict[str, Any]
    status: Literal["ok", "failed"]
    error: str = ""
    config: dict[str, Any] | None = None
    params_trainable: int | None = None
    act_bytes: int | None = None
    epochs_run: int | None = None
    stop_reason: str | None = None
    metrics: dict[str, float] = field(default_factory=lambda: {})


def _execute(runner: Runner, flags: dict[str, Any], data: Path | None, out_dir: Path, experiment_id: str) -> SweepRow:
    try:
        config = experiment_from_flags(flags, data=data, experiment_id=experiment_id)
        params = count_params(build_experiment_model(config, materialize=False)).trainable_params
        outcome = runner(config, out_dir)
    except SamPeftError as exc:
        logger.warning("sweep run %s (%s) failed: %s", experiment_id, flags, exc)
        return SweepRow(experiment_id, flags, "failed", error=str(exc))
    return SweepRow(
        experiment_id,
        flags,
        "ok",
        config=config.echo(),
        params_trainable=params,
        act_bytes=outcome.act_bytes,
        epochs_run=outcome.epochs_run,
        stop_reason=outcome.stop_reason,
        metrics=outcome.metrics,
    )


def sweep(
    grid: Mapping[str, list[Any]],
    *,
    data: Path | None,
    out_dir: Path,
    jobs: int = 1,
    runner: Runner = run_experiment,
    progress: bool | None = None,
) -> list[SweepRow]:
    """Run the cartesian product of the grid; failing combinations become failed rows."""
    combos = expand_grid(normalise_grid(grid))
    ids = [f"sweep_{i:03d}" for i in range(len(combos))]
    out_dir.mkdir(parents=True, exist_ok=True)
    show = _progress(progress)
    if jobs <= 1:
        return [
            _execute(runner, flags, data, out_dir, run_id)
            for flags, run_id in tqdm(list(zip(combos, ids, strict=True)), desc="sweep", disable=not show)
        ]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_execute, runner, flags, data, out_dir, run_id) for flags, run_id in zip(combos, ids, strict=True)]
        return [f.result() for f in tqdm(futures, desc="sweep", disable=not show)]


def write_sweep_csv(path: Path, rows: Sequence[SweepRow]) -> Path:
    tasks = sorted({task for row in rows for task in row.metrics})
    flag_names = list(dict.fromkeys(k for row in rows for k in row.flags))
    columns = [
        "experiment",
        "status",
        *flag_names,
        "params_trainable",
        "act_bytes",
        "epochs_run",
        "stop_reason",
        *tasks,
        "error",
    ]
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {
                    "experiment": row.experiment,
                    "status": row.status,
                    **row.flags,
                    "params_trainable": row.params_trainable,
                    "act_bytes": row.act_bytes,
                    "epochs_run": row.epochs_run,
                    "stop_reason": row.stop_reason,
                    **row.metrics,
                    "error": row.error,
                }
            )
    return path


# --- reports ---


@dataclass(frozen=True)
class ParamTable:
    preset: str
    method: str
    trainable_without_instance_head: int
    trainable_with_instance_head: int
    frozen: int
    encoder_delta: int
    quantized_bytes: int
    reference_delta: float | None

    def render(self) -> str:
        def m(n: float) -> str:
            return f"{n / 1e6:.3f}M"

        lines = [
            f"preset {self.preset}, method {self.method}",
            f"  trainable  w/o instance decoder | with instance decoder: "
            f"{m(self.trainable_without_instance_head)} | {m(self.trainable_with_instance_head)}",
            f"  frozen:          {self.frozen:,}",
            f"  encoder delta:   {self.encoder_delta:,} ({m(self.encoder_delta)})",
        ]
        if self.quantized_bytes:
            lines.append(f"  4-bit storage:   {self.quantized_bytes:,} bytes")
        if self.reference_delta is not None:
            lines.append(f"  expected delta:  {m(self.reference_delta)}")
        return "\n".join(lines)


def param_table(preset: str, peft: PeftConfig) -> ParamTable:
    report = count_params(build_model(preset, materialize=False), peft)
    reference = REFERENCE_ENCODER_DELTAS.get(peft.method) if preset == "vit-b-shape" else None
    return ParamTable(
        preset=preset,
        method=peft.short(),
        trainable_without_instance_head=report.trainable_without_instance_head,
        trainable_with_instance_head=report.trainable_params,
        frozen=report.frozen_params,
        encoder_delta=report.encoder_trainable,
        quantized_bytes=report.quantized_bytes,
        reference_delta=reference,
    )


@dataclass(frozen=True)
class MemoryComparison:
    method: str
    adapted: MemoryReport
    baseline: MemoryReport

    @property
    def encoder_ratio(self) -> float:
        base = self.baseline.encoder_activation_bytes
        return self.adapted.encoder_activation_bytes / base if base else 0.0

    def render(self) -> str:
        regions = sorted(set(self.adapted.activation_bytes_by_region) | set(self.baseline.activation_bytes_by_region))
        lines = [f"{'region':<20} {self.method:>16} {'full_ft':>16}"]
        for name in regions:
            a = self.adapted.activation_bytes_by_region.get(name, 0)
            b = self.baseline.activation_bytes_by_region.get(name, 0)
            lines.append(f"{name:<20} {a:>16,} {b:>16,}")
        lines.append(
            f"{'total':<20} {self.adapted.retained_activation_bytes:>16,} {self.baseline.retained_activation_bytes:>16,}"
        )
        lines.append(f"params {self.adapted.param_bytes:,} B, grads {self.adapted.grad_bytes:,} B, optimizer {self.adapted.optimizer_bytes:,} B")
        lines.append(f"encoder retained ratio vs full_ft: {self.encoder_ratio:.2f}")
        return "\n".join(lines)


def memory_comparison(preset: str, peft: PeftConfig, *, seed: int = 0) -> MemoryComparison:
    if preset in COUNT_ONLY_PRESETS:
        raise ConfigError(f"preset {preset} is count-only; memory probes run on the toy preset")
    adapted = memory_report(build_model(preset, seed=seed), peft, seed=seed)
    baseline = memory_report(build_model(preset, seed=seed), PeftConfig.create(method="full_ft"), seed=seed)
    return MemoryComparison(peft.short(), adapted, baseline)


# --- exports ---


@dataclass(frozen=True)
class ExportReport:
    kind: Literal["merge_lora", "qlora_full_precision"]
    source_method: str
    replaced: tuple[str, ...]
    max_abs_diff: float
    max_abs_diff_base: float | None = None


def probe_outputs(model: SamLite, *, seed: int = 0) -> np.ndarray[Any, Any]:
    """Mask logits and instance maps for one random image and a centred box, flattened."""
    vit = model.vit
    image = Tensor(np.random.default_rng(seed).random((vit.image_size, vit.image_size, vit.in_channels)).astype(model.dtype))
    prompts, _ = probe_prompts(vit.image_size, vit.image_size)
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            features = model.encode(image)
            logits = model.predict_mask(features, prompts).data
            maps = model.predict_instances(features).data
    finally:
        model.train(was_training)
    return np.concatenate([logits.reshape(-1), maps.reshape(-1)]).astype(np.float64)


def _max_abs_diff(a: np.ndarray[Any, Any], b: np.ndarray[Any, Any]) -> float:
    return float(np.max(np.abs(a - b)))


def export_merge_lora(ckpt_path: Path, out: Path) -> ExportReport:
    """Fold LoRA adapters into their weights; the result restores as a plain full_ft model."""
    ckpt = load_checkpoint(ckpt_path)
    model, config = restore_model(ckpt)
    if config.peft.method not in ("lora", "late_lora"):
        hint = "; export it to full precision first" if config.peft.method in QLORA_METHODS else ""
        raise ConfigError(f"merge_lora needs a LoRA checkpoint, got {config.peft.method}{hint}")
    before = probe_outputs(model)
    replaced = merge_lora_into(model)
    diff = _max_abs_diff(probe_outputs(model), before)
    merged = config.model_copy(update={"peft": PeftConfig.create(method="full_ft")})
    meta = {**ckpt.meta, "export": "merge_lora", "exported_from": config.peft.model_dump(mode="json"), "max_abs_diff": diff}
    save_checkpoint(out, Checkpoint.from_model(model, merged.echo(), meta))
    logger.info("merged %d LoRA layers; max abs diff %.3g", len(replaced), diff)
    return ExportReport("merge_lora", config.peft.method, tuple(replaced), diff)


def export_qlora_full_precision(ckpt_path: Path, base_path: Path | None, out: Path) -> ExportReport:
    """Put the learned adapters of a QLoRA run on the original full-precision weights."""
    ckpt = load_checkpoint(ckpt_path)
    config = parse_model(ExperimentConfig, ckpt.config)
    if config.peft.method not in QLORA_METHODS:
        raise ConfigError(f"qlora_full_precision needs a QLoRA checkpoint, got {config.peft.method}")
    base_path = base_path or base_checkpoint_path(ckpt_path)
    if not base_path.exists():
        raise DataError(f"original full-precision weights not found at {base_path} (--base)")
    base_ckpt = load_checkpoint(base_path)
    base_config = parse_model(ExperimentConfig, base_ckpt.config)
    if base_config.preset != config.preset:
        raise ConfigError(f"base weights are for preset {base_config.preset}, the run used {config.preset}")

    model = build_model(config.preset, seed=config.seed)
    load_state(model, base_ckpt.tensors)
    base_out = probe_outputs(model)
    replaced = export_qlora(config.peft, ckpt.tensors, model, rng=_adapter_rng(config))
    source, _ = restore_model(ckpt)
    exported_out = probe_outputs(model)
    diff = _max_abs_diff(exported_out, probe_outputs(source))
    diff_base = _max_abs_diff(exported_out, base_out)

    exported = config.model_copy(update={"peft": model.peft})
    meta = {
        **ckpt.meta,
        "export": "qlora_full_precision",
        "exported_from": config.peft.model_dump(mode="json"),
        "replaced": replaced,
        "max_abs_diff": diff,
        "max_abs_diff_base": diff_base,
    }
    save_checkpoint(out, Checkpoint.from_model(model, exported.echo(), meta))
    logger.info("re-based %d layers on full precision; max abs diff %.3g vs the 4-bit model", len(replaced), diff)
    return ExportReport("qlora_full_precision", config.peft.method, tuple(replaced), diff, diff_base)

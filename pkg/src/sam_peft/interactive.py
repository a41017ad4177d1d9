"""
Interactive segmentation: prompt simulation from annotations, the iterative-correction
training objective and the point / box / corrected evaluation protocol.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any, Literal, Self

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy import ndimage

from .errors import DataError, NumericalError, ShapeError
from .instanceseg import FOUR_CONNECTED, DistanceTargets, derive_targets, dice, mean_segmentation_accuracy
from .losses import mask_loss, mse, soft_dice_loss
from .optim import Adam
from .samlite import Point, PromptableModel, PromptSet
from .synth import Sample
from .tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

Array = np.ndarray[Any, Any]
PromptKind = Literal["point", "box"]
Metric = Literal["msa", "dice"]

BOX_JITTER = 0.05


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    batch_size: int = 2
    objects_per_image: int = 25
    correction_iterations: int = 7
    lr: float = 1e-5
    early_stop_patience: int = 10
    early_stop_tolerance: float = 1e-4
    max_epochs: int = 100
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> Self:
        for name in ("batch_size", "objects_per_image", "early_stop_patience", "max_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.correction_iterations < 0:
            raise ValueError("correction_iterations must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        return self

    @classmethod
    def resource_efficient(cls, **overrides: Any) -> TrainConfig:
        return cls.model_validate({"objects_per_image": 5, **overrides})


@dataclass(frozen=True)
class Correction:
    point: Point
    positive: bool


# --- prompt simulation ---


def _tight_box(mask: Array) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def sample_initial_prompt(
    mask: Array, kind: PromptKind, mode: Literal["train", "eval"], rng: np.random.Generator
) -> PromptSet:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DataError("cannot sample a prompt from an empty mask")
    if kind == "point":
        if mode == "train":
            pixels = np.argwhere(mask)
            r, c = pixels[rng.integers(len(pixels))]
        else:
            # Deepest interior pixel; the first one in row-major order on ties.
            edt = ndimage.distance_transform_edt(np.pad(mask, 1))[1:-1, 1:-1]
            r, c = np.unravel_index(int(np.argmax(edt)), mask.shape)
        return PromptSet(positive_points=((int(r), int(c)),))

    r0, c0, r1, c1 = _tight_box(mask)
    if mode == "train":
        h, w = mask.shape
        height, width = r1 - r0 + 1, c1 - c0 + 1
        r0 = max(0, r0 - int(round(rng.uniform(0, BOX_JITTER) * height)))
        r1 = min(h - 1, r1 + int(round(rng.uniform(0, BOX_JITTER) * height)))
        c0 = max(0, c0 - int(round(rng.uniform(0, BOX_JITTER) * width)))
        c1 = min(w - 1, c1 + int(round(rng.uniform(0, BOX_JITTER) * width)))
    return PromptSet(box=(r0, c0, r1, c1))


def sample_correction(pred: Array, truth: Array, rng: np.random.Generator) -> Correction | None:
    """
    A point in the largest connected component of the larger error set: positive in a
    missed region, negative in a spurious one. None when the prediction is exact.
    """
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ShapeError("sample_correction", pred.shape, truth.shape)
    missed = truth & ~pred
    spurious = pred & ~truth
    n_missed, n_spurious = int(missed.sum()), int(spurious.sum())
    if n_missed == 0 and n_spurious == 0:
        return None
    positive = n_missed >= n_spurious
    components, _ = ndimage.label(missed if positive else spurious, structure=FOUR_CONNECTED)
    sizes = np.bincount(components.reshape(-1))
    sizes[0] = 0
    pixels = np.argwhere(components == int(np.argmax(sizes)))
    r, c = pixels[rng.integers(len(pixels))]
    return Correction((int(r), int(c)), positive)


# --- training objective ---


def instance_loss(maps: Tensor, targets: DistanceTargets) -> Tensor:
    """MSE on both distance channels plus Dice on the foreground channel."""
    return (
        mse(maps[..., 0], targets.center)
        + mse(maps[..., 1], targets.boundary)
        + soft_dice_loss(maps[..., 2], targets.foreground)
    )


def _mean(terms: list[Tensor]) -> Tensor:
    return sum(terms[1:], terms[0]) * (1.0 / len(terms))


def interactive_training_step(
    model: PromptableModel,
    batch: Sequence[Sample],
    config: TrainConfig,
    optimizer: Adam | None,
    rng: np.random.Generator,
    *,
    train_instance_head: bool = False,
) -> float:
    """
    One optimizer step. Each sampled object gets an initial point or box, then
    `correction_iterations` rounds of corrective clicks; the loss is averaged over
    every (object, iteration) prediction.
    """
    mask_terms: list[Tensor] = []
    instance_terms: list[Tensor] = []
    for sample in batch:
        ids = sample.object_ids
        if not ids:
            logger.warning("image %s has no annotated objects; skipped", sample.image_id)
            continue
        chosen = rng.choice(ids, size=min(len(ids), config.objects_per_image), replace=False)
        features = model.encode(sample.image)
        for obj in chosen:
            truth = sample.instances == obj
            kind: PromptKind = "point" if rng.random() < 0.5 else "box"
            prompts = sample_initial_prompt(truth, kind, "train", rng)
            for it in range(config.correction_iterations + 1):
                logits = model.predict_mask(features, prompts)
                mask_terms.append(mask_loss(logits, truth))
                if it == config.correction_iterations:
                    break
                correction = sample_correction(logits.data > 0, truth, rng)
                if correction is not None:
                    prompts = prompts.with_point(correction.point, correction.positive)
        if train_instance_head:
            instance_terms.append(instance_loss(model.predict_instances(features), derive_targets(sample.instances)))

    if not mask_terms:
        logger.warning("batch without annotated objects; no update")
        return 0.0
    loss = _mean(mask_terms)
    if instance_terms:
        loss = loss + _mean(instance_terms)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericalError(f"training loss is {value}")
    if optimizer is not None and loss.requires_grad:
        backward(loss)
        optimizer.step()
        optimizer.zero_grad()
    return value


# --- evaluation ---


@dataclass(frozen=True)
class IterationEntry:
    mask: Array
    metric: float
    added: Correction | None


@dataclass(frozen=True)
class ObjectTrace:
    image_id: str
    object_id: int
    start: PromptKind
    entries: tuple[IterationEntry, ...]

    @property
    def metrics(self) -> list[float]:
        return [e.metric for e in self.entries]


@dataclass
class InteractiveResult:
    start: PromptKind
    traces: list[ObjectTrace] = field(default_factory=lambda: [])

    @property
    def aggregates(self) -> dict[str, float]:
        """Initial-prompt mean under the start name, last-iteration mean under ip / ib."""
        if not self.traces:
            return {}
        first = float(np.mean([t.metrics[0] for t in self.traces]))
        last = float(np.mean([t.metrics[-1] for t in self.traces]))
        return {self.start: first, "ip" if self.start == "point" else "ib": last}


def score_mask(pred: Array, truth: Array, metric: Metric) -> float:
    if metric == "dice":
        return dice(pred, truth)
    return mean_segmentation_accuracy(pred.astype(np.uint32), truth.astype(np.uint32))


def evaluate_object(
    model: PromptableModel,
    features: Tensor,
    truth: Array,
    start: PromptKind,
    rng: np.random.Generator,
    *,
    metric: Metric,
    iterations: int = 7,
) -> list[IterationEntry]:
    prompts = sample_initial_prompt(truth, start, "eval", rng)
    entries: list[IterationEntry] = []
    added: Correction | None = None
    for it in range(iterations + 1):
        pred = model.predict_mask(features, prompts).data > 0
        entries.append(IterationEntry(pred, score_mask(pred, truth, metric), added))
        if it == iterations:
            break
        added = sample_correction(pred, truth, rng)
        if added is not None:
            prompts = prompts.with_point(added.point, added.positive)
    return entries


def evaluate_interactive(
    model: PromptableModel,
    samples: Sequence[Sample],
    start: PromptKind,
    *,
    metric: Metric = "msa",
    seed: int = 0,
    iterations: int = 7,
) -> InteractiveResult:
    """Every object of every image, with a per-image random stream derived from (seed, image index)."""
    if not any(s.object_ids for s in samples):
        raise DataError("evaluation data has no annotated objects")
    was_training = model.training
    if hasattr(model, "eval"):
        model.eval()  # type: ignore[attr-defined]
    result = InteractiveResult(start)
    try:
        with no_grad():
            for index, sample in enumerate(samples):
                ids = sample.object_ids
                if not ids:
                    continue
                rng = np.random.default_rng([seed, index])
                features = model.encode(sample.image)
                for obj in ids:
                    truth = sample.instances == obj
                    entries = evaluate_object(
                        model, features, truth, start, rng, metric=metric, iterations=iterations
                    )
                    result.traces.append(ObjectTrace(sample.image_id, obj, start, tuple(entries)))
    finally:
        if hasattr(model, "train"):
            model.train(was_training)  # type: ignore[attr-defined]
    return result


"""
Synthetic cell-like datasets: elliptical blobs on a dark background with Gaussian
noise, written as NPA1 files plus a manifest.json.

    out/
      manifest.json
      train/img_0000.npa  train/lbl_0000.npa ...
      val/...
      test/...
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal, Self

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator
from scipy import ndimage

from .errors import DataError
from .npa import load_npa, save_npa
from .tensor import DType, Tensor

logger = logging.getLogger(__name__)

Array = np.ndarray[Any, Any]
SPLITS = ("train", "val", "test")
_SPLIT_OFFSET = {"train": 0, "val": 1, "test": 2}
_PLACEMENT_ATTEMPTS = 1000
_FOUR = ndimage.generate_binary_structure(2, 1)


class GenSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    image_size: int = 128
    n_train: int = 200
    n_val: int = 20
    n_test: int = 20
    min_instances: int = 3
    max_instances: int = 12
    min_radius: float = 4.0
    max_radius: float = 12.0
    contrast: float = 0.5
    noise: float = 0.05
    overlap_allowed: bool = False
    single_object: bool = False
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> Self:
        if self.image_size <= 0:
            raise ValueError("image_size must be positive")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("split sizes must be >= 0")
        if not 0 <= self.min_instances <= self.max_instances:
            raise ValueError("need 0 <= min_instances <= max_instances")
        if not 0 < self.min_radius <= self.max_radius:
            raise ValueError("need 0 < min_radius <= max_radius")
        if self.max_radius >= self.image_size / 2:
            raise ValueError(f"max_radius {self.max_radius} must be below image_size / 2")
        if not 0 < self.contrast <= 1:
            raise ValueError("contrast must be in (0, 1]")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        return self

    def split_size(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]

    @classmethod
    def resource_efficient(cls, **overrides: Any) -> GenSpec:
        """One training image and one validation image."""
        return cls.model_validate({"n_train": 1, "n_val": 1, "n_test": 1, **overrides})


class ManifestEntry(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    id: str
    image: str
    label: str


class DatasetManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format_version: int = 1
    task: Literal["instance", "semantic"] = "instance"
    metric: Literal["msa", "dice"] = "msa"
    image_size: int
    in_channels: int = 1
    splits: dict[str, list[ManifestEntry]]
    spec: GenSpec | None = None


@dataclass(frozen=True)
class Sample:
    image_id: str
    image: Tensor  # (H, W, C) f32 in [0, 1]
    instances: Array  # (H, W) u32

    @property
    def object_ids(self) -> list[int]:
        return [int(i) for i in np.unique(self.instances) if i != 0]


def _ellipse(size: int, rng: np.random.Generator, spec: GenSpec) -> Array:
    ry, rx = rng.uniform(spec.min_radius, spec.max_radius, size=2)
    theta = rng.uniform(0.0, math.pi)
    margin = spec.max_radius
    cy, cx = rng.uniform(margin, size - 1 - margin, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    u = dy * math.cos(theta) + dx * math.sin(theta)
    v = -dy * math.sin(theta) + dx * math.cos(theta)
    return (u / ry) ** 2 + (v / rx) ** 2 <= 1.0


def _draw(spec: GenSpec, rng: np.random.Generator, n: int, split: str, index: int) -> tuple[Array, Array]:
    size = spec.image_size
    labels = np.zeros((size, size), dtype=np.uint32)
    image = np.zeros((size, size), dtype=np.float64)
    occupied = np.zeros((size, size), dtype=bool)

    for k in range(1, n + 1):
        for _ in range(_PLACEMENT_ATTEMPTS):
            blob = _ellipse(size, rng, spec)
            if blob.any() and (spec.overlap_allowed or not (blob & occupied).any()):
                break
        else:
            raise DataError(
                f"could not place instance {k} in {split} image {index} after {_PLACEMENT_ATTEMPTS} attempts"
            )
        # Keep a one-pixel gap so non-overlapping blobs never touch.
        occupied |= ndimage.binary_dilation(blob, structure=_FOUR)
        labels[blob] = k
        image[blob] += rng.uniform(spec.contrast, 1.0)
    return image, labels


def render(spec: GenSpec, split: str, index: int) -> tuple[Array, Array]:
    """One (image, instance map) pair; a pure function of (spec, split, index)."""
    rng = np.random.default_rng([spec.seed, _SPLIT_OFFSET[split], index])
    n = 1 if spec.single_object else int(rng.integers(spec.min_instances, spec.max_instances + 1))
    need = 1 if spec.single_object else spec.min_instances
    # With overlap, later blobs can hide earlier ones completely; draw again until enough stay visible.
    for _ in range(_PLACEMENT_ATTEMPTS):
        image, labels = _draw(spec, rng, n, split, index)
        visible = np.unique(labels[labels != 0])
        if len(visible) >= need:
            break
        logger.debug("%s image %d: only %d of %d instances visible, redrawing", split, index, len(visible), n)
    else:
        raise DataError(
            f"{split} image {index}: fewer than {need} instances stayed visible after {_PLACEMENT_ATTEMPTS} draws"
        )
    if len(visible) < n:
        dense = np.zeros(n + 1, dtype=np.uint32)
        dense[visible] = np.arange(1, len(visible) + 1, dtype=np.uint32)
        labels = dense[labels]

    image += rng.normal(0.0, spec.noise, size=image.shape)
    return image.astype(np.float32)[..., None], labels


def generate(spec: GenSpec, out_dir: Path) -> DatasetManifest:
    out_dir.mkdir(parents=True, exist_ok=True)
    splits: dict[str, list[ManifestEntry]] = {}
    for split in SPLITS:
        entries: list[ManifestEntry] = []
        for i in range(spec.split_size(split)):
            image, labels = render(spec, split, i)
            img_rel, lbl_rel = f"{split}/img_{i:04d}.npa", f"{split}/lbl_{i:04d}.npa"
            save_npa(out_dir / img_rel, Tensor(image, dtype=DType.F32))
            save_npa(out_dir / lbl_rel, Tensor(labels, dtype=DType.U32))
            entries.append(ManifestEntry(id=f"{split}_{i:04d}", image=img_rel, label=lbl_rel))
        splits[split] = entries
        logger.info("wrote %d %s images to %s", len(entries), split, out_dir / split)

    manifest = DatasetManifest(
        task="semantic" if spec.single_object else "instance",
        metric="dice" if spec.single_object else "msa",
        image_size=spec.image_size,
        splits=splits,
        spec=spec,
    )
    write_manifest(manifest, out_dir)
    return manifest


def write_manifest(manifest: DatasetManifest, out_dir: Path) -> Path:
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest.model_dump(mode="json"), indent=2) + "\n", encoding="utf-8")
    return path


def read_manifest(data_dir: Path) -> DatasetManifest:
    path = data_dir / "manifest.json"
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"no manifest.json in {data_dir}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    try:
        return DatasetManifest.model_validate(raw)
    except ValidationError as exc:
        raise DataError(f"{path}: invalid manifest ({exc.error_count()} problems)") from None


def normalise(image: Array) -> Array:
    lo, hi = float(image.min()), float(image.max())
    if hi <= lo:
        return np.zeros_like(image, dtype=np.float32)
    return ((image - lo) / (hi - lo)).astype(np.float32)


def load(data_dir: Path, split: str, *, limit: int | None = None) -> list[Sample]:
    """Samples of one split in manifest order, images min-max normalised to [0, 1]."""
    manifest = read_manifest(data_dir)
    if split not in manifest.splits:
        raise DataError(f"{data_dir}: manifest has no {split!r} split")
    entries = manifest.splits[split]
    if limit is not None:
        entries = entries[:limit]
    samples: list[Sample] = []
    for entry in entries:
        image = load_npa(data_dir / entry.image)
        labels = load_npa(data_dir / entry.label)
        if labels.dtype is not DType.U32 or labels.ndim != 2:
            raise DataError(f"{data_dir / entry.label}: expected a 2-d u32 instance map")
        pixels = image.data if image.ndim == 3 else image.data[..., None]
        if pixels.shape[:2] != labels.shape:
            raise DataError(f"{entry.image} and {entry.label}: shapes {pixels.shape} and {labels.shape} differ")
        samples.append(Sample(entry.id, Tensor(normalise(pixels)), labels.data))
    return samples

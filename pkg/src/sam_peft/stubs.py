"""
Reference models that need no training: an oracle that answers from the ground
truth and a model that never predicts anything. They bracket every metric at 1.0
and 0.0 and stand in for SamLite wherever a PromptableModel is accepted.
"""

from __future__ import annotations

from collections.abc import Sequence
from typing import Any, Self

import numpy as np
from scipy import ndimage

from .errors import DataError
from .instanceseg import derive_targets
from .samlite import PromptSet
from .synth import Sample
from .tensor import Tensor

Array = np.ndarray[Any, Any]
LOGIT = 20.0


def _box_iou(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> float:
    r0, c0 = max(a[0], b[0]), max(a[1], b[1])
    r1, c1 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0, r1 - r0 + 1) * max(0, c1 - c0 + 1)

    def area(x: tuple[int, int, int, int]) -> int:
        return (x[2] - x[0] + 1) * (x[3] - x[1] + 1)

    return inter / (area(a) + area(b) - inter)


class OracleModel:
    """Looks the image up among known samples and returns the prompted object exactly."""

    def __init__(self, samples: Sequence[Sample]) -> None:
        self.training = False
        self._labels = {s.image.data.tobytes(): s.instances for s in samples}

    def train(self, mode: bool = True) -> Self:
        self.training = mode
        return self

    def eval(self) -> Self:
        return self.train(False)

    def encode(self, image: Tensor) -> Tensor:
        labels = self._labels.get(image.data.tobytes())
        if labels is None:
            raise DataError("oracle was not given this image")
        return Tensor(labels.astype(np.float32))

    def _object(self, labels: Array, prompts: PromptSet) -> int:
        for r, c in prompts.positive_points:
            if labels[r, c]:
                return int(labels[r, c])
        if prompts.box is not None:
            best, best_iou = 0, 0.0
            for idx, window in enumerate(ndimage.find_objects(labels), start=1):
                if window is None:
                    continue
                own = (window[0].start, window[1].start, window[0].stop - 1, window[1].stop - 1)
                iou = _box_iou(own, prompts.box)
                if iou > best_iou:
                    best, best_iou = idx, iou
            return best
        return 0

    def predict_mask(self, features: Tensor, prompts: PromptSet) -> Tensor:
        labels = features.data.astype(np.int64)
        obj = self._object(labels, prompts)
        mask = (labels == obj) & (obj != 0)
        return Tensor(np.where(mask, LOGIT, -LOGIT).astype(np.float32))

    def predict_instances(self, features: Tensor) -> Tensor:
        return Tensor(derive_targets(features.data.astype(np.int64)).stack())


class EmptyModel:
    """Predicts background everywhere."""

    def __init__(self, image_size: int) -> None:
        self.training = False
        self.image_size = image_size

    def encode(self, image: Tensor) -> Tensor:
        return image

    def predict_mask(self, features: Tensor, prompts: PromptSet) -> Tensor:
        return Tensor(np.full((self.image_size, self.image_size), -LOGIT, dtype=np.float32))

    def predict_instances(self, features: Tensor) -> Tensor:
        return Tensor(np.zeros((self.image_size, self.image_size, 3), dtype=np.float32))

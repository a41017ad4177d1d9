"""
Automatic instance segmentation: distance targets, seeded watershed decoding and
the metrics used to score instance and semantic predictions.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import ndimage

from .errors import ShapeError
from .samlite import InstanceHeadOutput

Array = np.ndarray[Any, Any]

# 4-connectivity for component labelling.
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)
MSA_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)


@dataclass(frozen=True)
class DistanceTargets:
    center: Array
    boundary: Array
    foreground: Array

    def stack(self) -> Array:
        """(H, W, 3) in head channel order: centre, boundary, foreground."""
        return np.stack([self.center, self.boundary, self.foreground], axis=-1)


def derive_targets(instances: Array) -> DistanceTargets:
    labels = np.asarray(instances)
    if labels.ndim != 2:
        raise ShapeError("derive_targets", labels.shape, detail="expected a 2-d instance map")
    center = np.zeros(labels.shape, dtype=np.float32)
    boundary = np.zeros(labels.shape, dtype=np.float32)
    foreground = (labels != 0).astype(np.float32)

    objects = ndimage.find_objects(labels.astype(np.int64))
    for idx, window in enumerate(objects, start=1):
        if window is None:
            continue
        # One pixel of margin so the distance transform sees background around the object.
        rows = slice(max(window[0].start - 1, 0), window[0].stop + 1)
        cols = slice(max(window[1].start - 1, 0), window[1].stop + 1)
        mask = labels[rows, cols] == idx
        padded = np.pad(mask, 1)
        edt = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]
        inside = edt[mask]
        top = inside.max()
        boundary[rows, cols][mask] = ((inside - 1.0) / (top - 1.0)) if top > 1.0 else 1.0

        rr, cc = np.nonzero(mask)
        dist = np.hypot(rr - rr.mean(), cc - cc.mean())
        # Min-max, so the pixel nearest the centroid is exactly 1 even between pixel centres.
        lo, hi = dist.min(), dist.max()
        center[rows, cols][mask] = (1.0 - (dist - lo) / (hi - lo)) if hi > lo else 1.0

    return DistanceTargets(center, boundary, foreground)


def watershed_decode(
    pred: InstanceHeadOutput, center_threshold: float = 0.5, foreground_threshold: float = 0.5
) -> Array:
    """
    Seeded watershed inside the foreground mask.

    Seeds are the 4-connected components of (centre > threshold) within the mask; the
    flood runs over 1 - boundary with ties broken by insertion order, then pixel index.
    Mask pixels no seed reaches stay 0.
    """
    shape = pred.foreground.shape
    if pred.center.shape != shape or pred.boundary.shape != shape or len(shape) != 2:
        raise ShapeError("watershed_decode", pred.center.shape, pred.boundary.shape, shape)
    mask = pred.foreground > foreground_threshold
    seeds, _ = ndimage.label((pred.center > center_threshold) & mask, structure=FOUR_CONNECTED)
    labels = seeds.astype(np.uint32)
    elevation = 1.0 - np.asarray(pred.boundary, dtype=np.float64)
    h, w = shape

    heap: list[tuple[float, int, int]] = []
    counter = 0
    for idx in np.flatnonzero(labels):
        heapq.heappush(heap, (float(elevation.flat[idx]), counter, int(idx)))
        counter += 1
    while heap:
        _, _, idx = heapq.heappop(heap)
        r, c = divmod(idx, w)
        label = labels[r, c]
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and labels[nr, nc] == 0:
                labels[nr, nc] = label
                heapq.heappush(heap, (float(elevation[nr, nc]), counter, nr * w + nc))
                counter += 1
    return labels


def _relabel(labels: Array) -> tuple[Array, int]:
    ids, inverse = np.unique(labels, return_inverse=True)
    dense = inverse.reshape(labels.shape)
    if ids[0] != 0:
        return dense + 1, len(ids)
    return dense, len(ids) - 1


def iou_matrix(pred: Array, truth: Array) -> Array:
    """IoU between every predicted (rows) and true (columns) instance."""
    p, n_pred = _relabel(np.asarray(pred))
    t, n_true = _relabel(np.asarray(truth))
    joint = np.bincount((p * (n_true + 1) + t).reshape(-1), minlength=(n_pred + 1) * (n_true + 1))
    joint = joint.reshape(n_pred + 1, n_true + 1)
    inter = joint[1:, 1:].astype(np.float64)
    area_p = joint[1:, :].sum(axis=1)
    area_t = joint[:, 1:].sum(axis=0)
    union = area_p[:, None] + area_t[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def mean_segmentation_accuracy(pred: Array, truth: Array) -> float:
    """Mean over IoU thresholds 0.5..0.95 of TP / (TP + FP + FN), matching on IoU > t."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError("mean_segmentation_accuracy", pred.shape, truth.shape)
    iou = iou_matrix(pred, truth)
    n_pred, n_true = iou.shape
    if n_pred == 0 and n_true == 0:
        return 1.0
    if n_pred == 0 or n_true == 0:
        return 0.0
    scores = []
    for t in MSA_THRESHOLDS:
        # Above 0.5 each object takes part in at most one matching pair.
        tp = int((iou > t).sum())
        scores.append(tp / (n_pred + n_true - tp))
    return float(np.mean(scores))


def dice(pred: Array, truth: Array) -> float:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError("dice", p.shape, t.shape)
    denom = p.sum() + t.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * (p * t).sum() / denom)

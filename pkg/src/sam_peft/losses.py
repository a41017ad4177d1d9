from __future__ import annotations

import numpy as np

from . import ops
from .errors import ShapeError
from .tensor import Array, Tensor


def _target(target: Array | Tensor, like: Tensor) -> Tensor:
    if isinstance(target, Tensor):
        return target
    arr = np.asarray(target, dtype=like.data.dtype)
    if arr.shape != like.shape:
        raise ShapeError("loss", like.shape, arr.shape, detail="prediction vs target")
    return Tensor(arr)


def soft_dice_loss(probs: Tensor, target: Array | Tensor, eps: float = 1e-6) -> Tensor:
    """1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)."""
    t = _target(target, probs)
    inter = ops.sum(probs * t)
    denom = ops.sum(probs) + ops.sum(t)
    return 1.0 - (inter * 2.0 + eps) / (denom + eps)


def dice_loss(logits: Tensor, target: Array | Tensor, eps: float = 1e-6) -> Tensor:
    return soft_dice_loss(ops.sigmoid(logits), target, eps)


def bce_with_logits(logits: Tensor, target: Array | Tensor) -> Tensor:
    t = _target(target, logits)
    return ops.mean(ops.softplus(logits) - logits * t)


def mask_loss(logits: Tensor, target: Array | Tensor) -> Tensor:
    """Loss for one predicted mask: Dice plus binary cross-entropy."""
    return dice_loss(logits, target) + bce_with_logits(logits, target)


def mse(pred: Tensor, target: Array | Tensor) -> Tensor:
    t = _target(target, pred)
    diff = pred - t
    return ops.mean(diff * diff)

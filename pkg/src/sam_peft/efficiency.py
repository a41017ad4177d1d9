from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ConfigError
from .ledger import ActivationLedger, ledger_report
from .losses import mask_loss, mse
from .peft import PeftConfig, apply_peft
from .quant import QuantizedLinear
from .samlite import PromptSet, SamLite
from .tensor import GradState, Tape, Tensor, backward

logger = logging.getLogger(__name__)

MODEL_PARTS = ("encoder", "prompt_encoder", "mask_decoder", "instance_head")
DECODER_SIDE = ("prompt_encoder", "mask_decoder", "instance_head")


@dataclass(frozen=True)
class PartCount:
    trainable: int = 0
    frozen: int = 0

    @property
    def total(self) -> int:
        return self.trainable + self.frozen


@dataclass(frozen=True)
class ParamReport:
    trainable_params: int
    frozen_params: int
    quantized_bytes: int
    per_part: dict[str, PartCount] = field(default_factory=lambda: {})

    @property
    def total_params(self) -> int:
        return self.trainable_params + self.frozen_params

    @property
    def encoder_trainable(self) -> int:
        return self.per_part["encoder"].trainable

    @property
    def decoder_side_params(self) -> int:
        return sum(self.per_part[p].total for p in DECODER_SIDE)

    @property
    def trainable_without_instance_head(self) -> int:
        return self.trainable_params - self.per_part["instance_head"].trainable

    def to_dict(self) -> dict[str, Any]:
        return {
            "trainable_params": self.trainable_params,
            "frozen_params": self.frozen_params,
            "total_params": self.total_params,
            "quantized_bytes": self.quantized_bytes,
            "encoder_trainable": self.encoder_trainable,
            "decoder_side_params": self.decoder_side_params,
            "trainable_without_instance_head": self.trainable_without_instance_head,
            "per_part": {k: {"trainable": v.trainable, "frozen": v.frozen} for k, v in self.per_part.items()},
        }


def _ensure_adapted(model: SamLite, config: PeftConfig | None) -> None:
    if config is None:
        return
    if model.peft is None:
        apply_peft(model, config)
    elif model.peft != config:
        raise ConfigError(f"model is adapted with {model.peft.short()}, not {config.short()}")


def count_params(model: SamLite, config: PeftConfig | None = None) -> ParamReport:
    """Exact trainable/frozen element counts; 4-bit weights count as frozen elements."""
    _ensure_adapted(model, config)
    counts: dict[str, list[int]] = {part: [0, 0] for part in MODEL_PARTS}
    for name, p in model.named_parameters():
        part = name.split(".", 1)[0]
        counts.setdefault(part, [0, 0])[0 if p.requires_grad else 1] += p.size
    quantized_bytes = 0
    for _, module in model.encoder.named_modules():
        if isinstance(module, QuantizedLinear):
            counts["encoder"][1] += module.weight_elements
            quantized_bytes += module.quantized_bytes
    per_part = {k: PartCount(v[0], v[1]) for k, v in counts.items()}
    return ParamReport(
        trainable_params=sum(c.trainable for c in per_part.values()),
        frozen_params=sum(c.frozen for c in per_part.values()),
        quantized_bytes=quantized_bytes,
        per_part=per_part,
    )


def param_seq_ratio(param_count: float, seq_len: int) -> float:
    """Parameters per token of sequence length: the scale of activations relative to weights."""
    if seq_len <= 0:
        raise ConfigError(f"sequence length must be positive, got {seq_len}")
    if param_count <= 0:
        raise ConfigError(f"parameter count must be positive, got {param_count}")
    return param_count / seq_len


@dataclass(frozen=True)
class MemoryReport:
    param_bytes: int
    grad_bytes: int
    optimizer_bytes: int
    ledger: ActivationLedger

    @property
    def retained_activation_bytes(self) -> int:
        return self.ledger.total_retained_bytes

    @property
    def encoder_activation_bytes(self) -> int:
        return self.ledger.encoder_bytes

    @property
    def activation_bytes_by_region(self) -> dict[str, int]:
        return self.ledger.by_region

    def to_dict(self) -> dict[str, Any]:
        return {
            "param_bytes": self.param_bytes,
            "grad_bytes": self.grad_bytes,
            "optimizer_bytes": self.optimizer_bytes,
            **self.ledger.to_dict(),
        }


def probe_prompts(height: int, width: int) -> tuple[PromptSet, np.ndarray[Any, Any]]:
    """A centred box prompt and its filled target mask."""
    r0, c0, r1, c1 = height // 4, width // 4, (3 * height) // 4, (3 * width) // 4
    target = np.zeros((height, width))
    target[r0 : r1 + 1, c0 : c1 + 1] = 1.0
    return PromptSet(box=(r0, c0, r1, c1)), target


def memory_report(
    model: SamLite,
    config: PeftConfig | None = None,
    input_shape: tuple[int, int, int] | None = None,
    *,
    seed: int = 0,
    with_instance_head: bool = True,
) -> MemoryReport:
    """
    Run one forward and backward pass on a random probe image and read the activation
    ledger. Gradients already on the model are left as they were.
    """
    _ensure_adapted(model, config)
    if not model.materialized:
        raise ConfigError("memory probes need a materialized model (use the toy preset)")
    vit = model.vit
    shape = input_shape or (vit.image_size, vit.image_size, vit.in_channels)
    rng = np.random.default_rng(seed)
    image = Tensor(rng.random(shape).astype(model.dtype))
    prompts, target = probe_prompts(shape[0], shape[1])

    params = model.parameters()
    saved = GradState.capture(params)
    was_training = model.training
    model.train()
    try:
        with Tape() as tape:
            features = model.encode(image)
            loss = mask_loss(model.predict_mask(features, prompts), target)
            if with_instance_head:
                loss = loss + mse(model.predict_instances(features), np.zeros((*shape[:2], 3)))
            backward(loss)
    finally:
        saved.restore(params)
        model.train(was_training)

    trainable = [p for p in params if p.requires_grad]
    trainable_bytes = sum(p.nbytes for p in trainable)
    quantized = sum(m.quantized_bytes for _, m in model.named_modules() if isinstance(m, QuantizedLinear))
    report = MemoryReport(
        param_bytes=sum(p.nbytes for p in params) + quantized,
        grad_bytes=trainable_bytes,
        optimizer_bytes=2 * trainable_bytes,
        ledger=ledger_report(tape),
    )
    logger.debug("memory probe: %s", report.to_dict())
    return report

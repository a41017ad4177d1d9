"""
Parameter-efficient fine-tuning of the image encoder.

Every method leaves the prompt encoder, mask decoder and instance head trainable and
only changes what happens inside the encoder: which tensors are unfrozen, which
adapter modules are attached, or (QLoRA) which weights are stored in 4 bit.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Mapping
from typing import TYPE_CHECKING, Any, Literal, Self, get_args

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from . import ops
from .config import parse_model
from .errors import ConfigError, ShapeError
from .nn import Linear, Module, Parameter
from .quant import QuantizedLinear
from .suggest import unknown_choice_message
from .tensor import Array, Tensor
from .vit import Block, ssf_points

if TYPE_CHECKING:
    from .samlite import SamLite

logger = logging.getLogger(__name__)

Method = Literal[
    "full_ft",
    "freeze_encoder",
    "bias_tune",
    "ln_tune",
    "attn_tune",
    "lora",
    "qlora",
    "adaptformer",
    "ssf",
    "fact",
    "late_ft",
    "late_lora",
    "late_qlora",
]
METHODS: tuple[str, ...] = get_args(Method)

LORA_METHODS = frozenset({"lora", "qlora", "late_lora", "late_qlora"})
QLORA_METHODS = frozenset({"qlora", "late_qlora"})
LATE_METHODS = frozenset({"late_ft", "late_lora", "late_qlora"})
SELECTIVE_TAGS = {"bias_tune": "bias", "ln_tune": "norm", "attn_tune": "attention"}

# Which methods a hyperparameter applies to; passing it to any other method is an error.
_APPLIES_TO: dict[str, frozenset[str]] = {
    "rank": LORA_METHODS | {"fact"},
    "alpha": LORA_METHODS | {"fact", "adaptformer"},
    "lora_scope": LORA_METHODS,
    "projection_size": frozenset({"adaptformer"}),
    "dropout": frozenset({"adaptformer", "fact"}),
    "late_fraction": LATE_METHODS,
    "quant_bits": QLORA_METHODS,
    "quant_block": QLORA_METHODS,
}


def _defaults(method: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    if method in LORA_METHODS:
        out.update(rank=32, alpha=1.0, lora_scope="classic")
    if method in QLORA_METHODS:
        out.update(quant_bits=4, quant_block=64)
    if method in LATE_METHODS:
        out.update(late_fraction=0.5)
    if method == "fact":
        out.update(rank=16, alpha=1.0, dropout=0.1)
    if method == "adaptformer":
        out.update(projection_size=64, alpha=1.0)
    return out


class PeftConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    method: Method
    rank: int | None = None
    alpha: float | Literal["learned"] | None = None
    lora_scope: Literal["classic", "all"] | None = None
    projection_size: int | None = None
    dropout: float | None = None
    late_fraction: float | None = None
    quant_bits: int | None = None
    quant_block: int | None = None

    @model_validator(mode="before")
    @classmethod
    def _fill_defaults(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        raw: dict[str, Any] = {k: v for k, v in data.items() if v is not None}  # pyright: ignore[reportUnknownVariableType]
        method = str(raw.get("method", ""))
        if method not in METHODS:
            raise ValueError(unknown_choice_message("method", method, METHODS))
        for key in raw:
            applies = _APPLIES_TO.get(key)
            if applies is not None and method not in applies:
                raise ValueError(f"{key} does not apply to method {method}")
        return {**_defaults(method), **raw}

    @model_validator(mode="after")
    def _check(self) -> Self:
        if self.rank is not None and self.rank <= 0:
            raise ValueError("rank must be positive")
        if isinstance(self.alpha, float) and self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.method == "fact" and self.alpha == "learned":
            raise ValueError("FacT uses a fixed alpha")
        if self.projection_size is not None and self.projection_size <= 0:
            raise ValueError("projection_size must be positive")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.late_fraction is not None and not 0.0 < self.late_fraction <= 1.0:
            raise ValueError("late_fraction must be in (0, 1]")
        if self.quant_bits is not None and self.quant_bits != 4:
            raise ValueError("only 4-bit quantization is supported")
        if self.quant_block is not None and self.quant_block <= 0:
            raise ValueError("quant_block must be positive")
        return self

    @classmethod
    def create(cls, **values: Any) -> PeftConfig:
        return parse_model(cls, values)

    def adapted_blocks(self, depth: int) -> range:
        """Blocks a placement-aware method touches: the last ceil(fraction * depth) for late variants."""
        if self.late_fraction is None:
            return range(depth)
        n = max(1, math.ceil(self.late_fraction * depth - 1e-9))
        return range(depth - n, depth)

    def short(self) -> str:
        parts = [self.method]
        for key in ("rank", "alpha", "lora_scope", "projection_size", "dropout", "late_fraction"):
            value = getattr(self, key)
            if value is not None:
                parts.append(f"{key}={value}")
        return " ".join(parts)


Trainability = dict[str, bool]


# --- adapters ---


class _Scaled(Module):
    """Shared alpha handling: a fixed float, or one learned scalar."""

    alpha: float
    alpha_param: Parameter | None

    def _init_alpha(self, alpha: float | str, dtype: np.dtype[Any]) -> None:
        if alpha == "learned":
            self.alpha = 1.0
            self.alpha_param = Parameter(np.ones(1, dtype=dtype), {"adapter"})
        else:
            self.alpha = float(alpha)
            self.alpha_param = None

    @property
    def alpha_value(self) -> float:
        return float(self.alpha_param.data[0]) if self.alpha_param is not None else self.alpha

    def _scale(self, y: Tensor) -> Tensor:
        if self.alpha_param is not None:
            return y * self.alpha_param
        return y if self.alpha == 1.0 else y * self.alpha


class LoraAdapter(_Scaled):
    """Low-rank update alpha * A @ B for one d_in -> d_out target."""

    def __init__(
        self,
        d_in: int,
        d_out: int,
        rank: int,
        *,
        target: str,
        alpha: float | str = 1.0,
        rng: np.random.Generator,
        dtype: np.dtype[Any],
    ) -> None:
        if rank >= d_in:
            raise ConfigError(f"LoRA rank {rank} must be smaller than the input width {d_in}")
        self.target = target
        self.rank = rank
        self.A = Parameter(rng.normal(0.0, 0.02, (d_in, rank)).astype(dtype), {"adapter"})
        self.B = Parameter(np.zeros((rank, d_out), dtype=dtype), {"adapter"})
        self._init_alpha(alpha, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self._scale((x @ self.A) @ self.B)

    def delta_weight(self) -> Array:
        return self.alpha_value * (self.A.data @ self.B.data)


class FusedQkvLora(Module):
    """LoRA on q and v of a fused qkv projection; the k slice gets no update."""

    def __init__(self, d: int, rank: int, *, alpha: float | str, rng: np.random.Generator, dtype: np.dtype[Any]):
        self.d = d
        self.q = LoraAdapter(d, d, rank, target="q", alpha=alpha, rng=rng, dtype=dtype)
        self.v = LoraAdapter(d, d, rank, target="v", alpha=alpha, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        zeros = Tensor(np.zeros((*x.shape[:-1], self.d), dtype=x.data.dtype), param_like=True)
        return ops.concat([self.q(x), zeros, self.v(x)], axis=-1)

    def delta_weight(self) -> Array:
        dq = self.q.delta_weight()
        return np.concatenate([dq, np.zeros_like(dq), self.v.delta_weight()], axis=1)


class FactStore(Module):
    """Factors U, V shared by every block; one r x r core per (block, target)."""

    def __init__(
        self,
        d: int,
        rank: int,
        *,
        alpha: float = 1.0,
        dropout: float | None = None,
        rng: np.random.Generator,
        dtype: np.dtype[Any],
    ) -> None:
        if rank >= d:
            raise ConfigError(f"FacT rank {rank} must be smaller than the width {d}")
        self.rank = rank
        self.alpha = float(alpha)
        self.dropout = dropout or 0.0
        std = 1.0 / math.sqrt(d)
        self.U = Parameter(rng.normal(0.0, std, (d, rank)).astype(dtype), {"adapter"})
        self.V = Parameter(rng.normal(0.0, std, (d, rank)).astype(dtype), {"adapter"})
        self.sigmas: dict[str, Parameter] = {}
        self._dtype = dtype
        self._rng = rng

    @staticmethod
    def key(block: int, target: str) -> str:
        return f"{block}_{target}"

    def register(self, block: int, target: str) -> Parameter:
        sigma = Parameter(np.zeros((self.rank, self.rank), dtype=self._dtype), {"adapter"})
        self.sigmas[self.key(block, target)] = sigma
        return sigma

    def sigma(self, block: int, target: str) -> Parameter:
        try:
            return self.sigmas[self.key(block, target)]
        except KeyError:
            raise ConfigError(f"no FacT core registered for block {block}, target {target}") from None

    def delta(self, x: Tensor, block: int, target: str) -> Tensor:
        sigma = self.sigma(block, target)
        h = ops.dropout(x @ self.U, self.dropout, self._rng, training=self.training)
        out = (h @ sigma) @ ops.transpose(self.V)
        return out if self.alpha == 1.0 else out * self.alpha

    def delta_weight(self, block: int, target: str) -> Array:
        sigma = self.sigma(block, target)
        return self.alpha * (self.U.data @ sigma.data @ self.V.data.T)


class FactQkvDelta(Module):
    """FacT update for the q and v slices of one block's fused qkv."""

    def __init__(self, store: FactStore, block: int, d: int) -> None:
        # Held privately: the store is owned (and counted) by the encoder.
        self._store = store
        self.block = block
        self.d = d

    def forward(self, x: Tensor) -> Tensor:
        zeros = Tensor(np.zeros((*x.shape[:-1], self.d), dtype=x.data.dtype), param_like=True)
        dq = self._store.delta(x, self.block, "q")
        dv = self._store.delta(x, self.block, "v")
        return ops.concat([dq, zeros, dv], axis=-1)

    def delta_weight(self) -> Array:
        dq = self._store.delta_weight(self.block, "q")
        return np.concatenate([dq, np.zeros_like(dq), self._store.delta_weight(self.block, "v")], axis=1)


class AdaptFormerModule(_Scaled):
    """Bottleneck branch in parallel to a block's MLP: alpha * up(relu(down(x)))."""

    def __init__(
        self,
        d: int,
        projection_size: int,
        *,
        alpha: float | str = 1.0,
        dropout: float | None = None,
        rng: np.random.Generator,
        dtype: np.dtype[Any],
    ) -> None:
        self.down = Linear(d, projection_size, rng=rng, dtype=dtype, tags={"adapter"})
        self.up = Linear(projection_size, d, rng=None, dtype=dtype, tags={"adapter"})
        self.dropout = dropout or 0.0
        self._rng = rng
        self._init_alpha(alpha, dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = ops.relu(self.down(x))
        h = ops.dropout(h, self.dropout, self._rng, training=self.training)
        return self._scale(self.up(h))


class ScaleShift(Module):
    """SSF: y' = gamma * y + beta over the channel axis."""

    def __init__(self, channels: int, *, dtype: np.dtype[Any]) -> None:
        self.gamma = Parameter(np.ones(channels, dtype=dtype), {"adapter"})
        self.beta = Parameter(np.zeros(channels, dtype=dtype), {"adapter"})

    def forward(self, y: Tensor) -> Tensor:
        return y * self.gamma + self.beta


# --- functional forms ---


def lora_forward(x: Tensor, weight: Tensor, adapter: LoraAdapter) -> Tensor:
    return x @ weight + adapter(x)


def fact_forward(x: Tensor, weight: Tensor, store: FactStore, block: int, target: str) -> Tensor:
    return x @ weight + store.delta(x, block, target)


def adaptformer_forward(x: Tensor, mlp: Callable[[Tensor], Tensor], module: AdaptFormerModule) -> Tensor:
    return mlp(x) + module(x)


def merge_lora(weight: Tensor | Array, adapter: LoraAdapter | FusedQkvLora) -> Array:
    w = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
    delta = adapter.delta_weight()
    if delta.shape != w.shape:
        raise ShapeError("merge_lora", w.shape, delta.shape)
    return (w + delta).astype(w.dtype)


def merge_lora_into(model: Module) -> list[str]:
    """Fold every LoRA adapter into its dense weight; returns the merged module paths."""
    merged: list[str] = []
    for name, module in model.named_modules():
        adapter = getattr(module, "adapter", None)
        if adapter is None:
            continue
        if isinstance(module, QuantizedLinear):
            raise ConfigError(f"{name}: cannot merge into 4-bit weights; export to full precision first")
        if not isinstance(module, Linear) or not isinstance(adapter, LoraAdapter | FusedQkvLora):
            raise ConfigError(f"{name}: only LoRA adapters can be merged")
        module.weight.data = merge_lora(module.weight, adapter)
        module.adapter = None
        merged.append(name)
    return merged


# --- method application ---

_LORA_ALL_TARGETS = ("qkv", "attn_proj", "mlp_fc1", "mlp_fc2")
_QUANTIZED_LINEARS = ("qkv", "attn_proj", "mlp_fc1", "mlp_fc2")


def trainability(model: Module) -> Trainability:
    return {name: p.requires_grad for name, p in model.named_parameters()}


def select_trainable(model: SamLite, method: str) -> Trainability:
    """Unfreeze the encoder tensors whose role tag matches the method, plus the decoder side."""
    tag = SELECTIVE_TAGS.get(method)
    if tag is None:
        raise ConfigError(unknown_choice_message("selective method", method, SELECTIVE_TAGS))
    for name, p in model.named_parameters():
        if not p.tags:
            raise ConfigError(f"parameter {name} has no role tags; selective tuning needs every tensor labelled")
        p.requires_grad = (tag in p.tags) if name.startswith("encoder.") else True
    return trainability(model)


def _attach_lora(block: Block, cfg: PeftConfig, rng: np.random.Generator, dtype: np.dtype[Any]) -> None:
    assert cfg.rank is not None and cfg.alpha is not None
    d = block.attn_proj.d_in
    if cfg.lora_scope == "classic":
        block.qkv.adapter = FusedQkvLora(d, cfg.rank, alpha=cfg.alpha, rng=rng, dtype=dtype)
        return
    for target in _LORA_ALL_TARGETS:
        layer: Linear | QuantizedLinear = getattr(block, target)
        layer.adapter = LoraAdapter(layer.d_in, layer.d_out, cfg.rank, target=target, alpha=cfg.alpha, rng=rng, dtype=dtype)


def qlora_wrap(model: SamLite, cfg: PeftConfig, rng: np.random.Generator) -> Trainability:
    """Quantize every encoder linear to 4 bit, then add full-precision LoRA in the adapted blocks."""
    if cfg.method not in QLORA_METHODS:
        raise ConfigError(f"qlora_wrap needs a QLoRA method, got {cfg.method}")
    assert cfg.quant_block is not None
    blocks = model.encoder.blocks
    for block in blocks:
        for attr in _QUANTIZED_LINEARS:
            layer = getattr(block, attr)
            if isinstance(layer, Linear):
                setattr(block, attr, QuantizedLinear(layer, block=cfg.quant_block, materialize=model.materialized))
    for i in cfg.adapted_blocks(len(blocks)):
        _attach_lora(blocks[i], cfg, rng, model.dtype)
    return trainability(model)


def apply_peft(model: SamLite, cfg: PeftConfig, *, rng: np.random.Generator | None = None) -> Trainability:
    if model.peft is not None:
        raise ConfigError(f"model is already adapted with {model.peft.method}; methods do not stack")
    rng = rng if rng is not None else np.random.default_rng(0)
    encoder = model.encoder
    blocks = encoder.blocks
    d = encoder.config.embed_dim
    dtype = model.dtype
    if cfg.rank is not None and cfg.rank >= d:
        raise ConfigError(f"rank {cfg.rank} must be smaller than the embedding width {d}")

    for name, p in model.named_parameters():
        p.requires_grad = not name.startswith("encoder.")

    method = cfg.method
    adapted = cfg.adapted_blocks(len(blocks))
    if method == "full_ft":
        for p in encoder.parameters():
            p.requires_grad = True
    elif method in SELECTIVE_TAGS:
        select_trainable(model, method)
    elif method == "late_ft":
        for i in adapted:
            for p in blocks[i].parameters():
                p.requires_grad = True
    elif method in ("lora", "late_lora"):
        for i in adapted:
            _attach_lora(blocks[i], cfg, rng, dtype)
    elif method in QLORA_METHODS:
        qlora_wrap(model, cfg, rng)
    elif method == "adaptformer":
        assert cfg.projection_size is not None and cfg.alpha is not None
        for block in blocks:
            block.adaptformer = AdaptFormerModule(
                d, cfg.projection_size, alpha=cfg.alpha, dropout=cfg.dropout, rng=rng, dtype=dtype
            )
    elif method == "ssf":
        for block in blocks:
            block.ssf = {point: ScaleShift(width, dtype=dtype) for point, width in ssf_points(encoder.config).items()}
    elif method == "fact":
        assert cfg.rank is not None and isinstance(cfg.alpha, float)
        store = FactStore(d, cfg.rank, alpha=cfg.alpha, dropout=cfg.dropout, rng=rng, dtype=dtype)
        encoder.fact = store
        for block in blocks:
            store.register(block.index, "q")
            store.register(block.index, "v")
            block.qkv.adapter = FactQkvDelta(store, block.index, d)

    model.peft = cfg
    result = trainability(model)
    logger.debug(
        "applied %s: %d/%d tensors trainable", cfg.short(), sum(result.values()), len(result)
    )
    return result


def full_precision_config(cfg: PeftConfig) -> PeftConfig:
    """The LoRA config a QLoRA config becomes once its base is back at full precision."""
    if cfg.method not in QLORA_METHODS:
        raise ConfigError(f"expected a QLoRA method, got {cfg.method}")
    values: dict[str, Any] = {
        "method": "late_lora" if cfg.method == "late_qlora" else "lora",
        "rank": cfg.rank,
        "alpha": cfg.alpha,
        "lora_scope": cfg.lora_scope,
    }
    if cfg.method == "late_qlora":
        values["late_fraction"] = cfg.late_fraction
    return PeftConfig.create(**values)


def export_qlora(
    cfg: PeftConfig, adapted: Mapping[str, Tensor], base: SamLite, *, rng: np.random.Generator | None = None
) -> list[str]:
    """
    Rebuild a QLoRA model for inference on `base`, an unadapted model holding the original
    full-precision weights: LoRA adapters are attached (not merged) and every tensor of
    `adapted` except the 4-bit storage is copied over. Returns the replaced layer paths.
    """
    if cfg.method not in QLORA_METHODS:
        raise ConfigError(f"only QLoRA models can be exported to full precision, got {cfg.method}")
    apply_peft(base, full_precision_config(cfg), rng=rng)
    own = dict(base.named_tensors())
    replaced: list[str] = []
    for name, t in adapted.items():
        if name.endswith(".qweight"):
            replaced.append(name.removesuffix(".qweight"))
            continue
        if name.endswith(".absmax"):
            continue
        target = own.get(name)
        if target is None:
            raise ConfigError(f"adapter/target mismatch: {name} has no counterpart in the full-precision model")
        if target.shape != t.shape:
            raise ShapeError("export_qlora", t.shape, target.shape, detail=name)
        target.data = t.data.astype(target.data.dtype, copy=True)
    if not replaced:
        raise ConfigError("no 4-bit weights found; is this a QLoRA model?")
    return sorted(replaced)

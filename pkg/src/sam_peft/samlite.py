"""
Prompt encoder, two-way mask decoder and the three-channel instance head, composed
with the ViT encoder into one promptable segmentation model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Protocol, Self

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from . import ops
from .config import parse_model
from .errors import ConfigError, DataError, ShapeError
from .nn import Attention, Conv2d, ConvTranspose2d, LayerNorm, Linear, Module, Parameter, mlp_relu
from .suggest import unknown_choice_message
from .tensor import Tensor, region
from .vit import VIT_PRESETS, ImageEncoder, VitConfig

if TYPE_CHECKING:
    from .peft import PeftConfig

logger = logging.getLogger(__name__)

Point = tuple[int, int]
Box = tuple[int, int, int, int]


@dataclass(frozen=True)
class PromptSet:
    positive_points: tuple[Point, ...] = ()
    negative_points: tuple[Point, ...] = ()
    box: Box | None = None

    def __len__(self) -> int:
        return len(self.positive_points) + len(self.negative_points) + (2 if self.box is not None else 0)

    def with_point(self, point: Point, positive: bool) -> PromptSet:
        if positive:
            return PromptSet((*self.positive_points, point), self.negative_points, self.box)
        return PromptSet(self.positive_points, (*self.negative_points, point), self.box)

    def validate(self, height: int, width: int) -> None:
        if len(self) == 0:
            raise DataError("empty prompt set: at least one point or a box is needed")
        for r, c in (*self.positive_points, *self.negative_points):
            if not (0 <= r < height and 0 <= c < width):
                raise DataError(f"point ({r}, {c}) is outside the {height}x{width} image")
        if self.box is not None:
            r0, c0, r1, c1 = self.box
            if not (0 <= r0 <= r1 < height and 0 <= c0 <= c1 < width):
                raise DataError(f"box {self.box} is outside the {height}x{width} image or inverted")


@dataclass(frozen=True)
class InstanceHeadOutput:
    """Channel-last maps in [0, 1]: distance to centre, distance to boundary, foreground."""

    center: np.ndarray[Any, Any]
    boundary: np.ndarray[Any, Any]
    foreground: np.ndarray[Any, Any]

    @classmethod
    def from_array(cls, maps: np.ndarray[Any, Any]) -> InstanceHeadOutput:
        return cls(maps[..., 0], maps[..., 1], maps[..., 2])


class DecoderConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    token_dim: int = 32
    heads: int = 4
    mlp_dim: int = 128
    cross_attention_layers: int = 2
    instance_channels: tuple[int, int, int, int] = (32, 32, 16, 16)

    @model_validator(mode="after")
    def _check(self) -> Self:
        if self.token_dim % self.heads:
            raise ValueError(f"token_dim {self.token_dim} is not divisible by heads {self.heads}")
        if self.token_dim % 8:
            raise ValueError("token_dim must be a multiple of 8 (two 2x upsamplings halve it twice)")
        if self.cross_attention_layers < 1:
            raise ValueError("cross_attention_layers must be >= 1")
        return self


DECODER_PRESETS: dict[str, DecoderConfig] = {
    "toy": DecoderConfig(),
    "vit-b-shape": DecoderConfig(
        token_dim=256, heads=8, mlp_dim=2048, instance_channels=(256, 128, 64, 32)
    ),
}
DECODER_PRESETS["vit-l-shape"] = DECODER_PRESETS["vit-b-shape"]
DECODER_PRESETS["vit-h-shape"] = DECODER_PRESETS["vit-b-shape"]

# Presets too large to run forward passes on; they exist for parameter counting.
COUNT_ONLY_PRESETS = frozenset({"vit-b-shape", "vit-l-shape", "vit-h-shape"})


def sinusoidal_encoding(rows: np.ndarray[Any, Any], cols: np.ndarray[Any, Any], dim: int) -> np.ndarray[Any, Any]:
    """
    Encode normalised coordinates in [0, 1] as (n, dim): sin/cos of rows, then of cols.

    Frequencies are geometric from 1 to dim / 4 cycles over the image.
    """
    quarter = dim // 4
    freqs = np.geomspace(1.0, max(quarter, 1), quarter) * (2 * math.pi)
    parts: list[np.ndarray[Any, Any]] = []
    for coord in (rows, cols):
        angles = np.asarray(coord, dtype=np.float64)[:, None] * freqs[None, :]
        parts.extend([np.sin(angles), np.cos(angles)])
    return np.concatenate(parts, axis=1)


class PromptEncoder(Module):
    def __init__(self, dim: int, image_size: int, *, rng: np.random.Generator | None, dtype: np.dtype[Any]) -> None:
        if dim % 4:
            raise ConfigError(f"prompt token width {dim} must be a multiple of 4")
        self.dim = dim
        self.image_size = image_size
        self._dtype = dtype

        def label() -> Parameter:
            init = np.zeros(dim) if rng is None else rng.normal(0.0, 1.0, dim)
            return Parameter(init.astype(dtype), {"embedding", "prompt"})

        self.label_pos = label()
        self.label_neg = label()
        self.label_box_tl = label()
        self.label_box_br = label()

    def positional(self, points: list[Point]) -> np.ndarray[Any, Any]:
        coords = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        norm = (coords + 0.5) / self.image_size
        return sinusoidal_encoding(norm[:, 0], norm[:, 1], self.dim).astype(self._dtype)

    def forward(self, prompts: PromptSet) -> Tensor:
        prompts.validate(self.image_size, self.image_size)
        points: list[Point] = []
        labels: list[Parameter] = []
        for p in prompts.positive_points:
            points.append(p)
            labels.append(self.label_pos)
        for p in prompts.negative_points:
            points.append(p)
            labels.append(self.label_neg)
        if prompts.box is not None:
            r0, c0, r1, c1 = prompts.box
            points.extend([(r0, c0), (r1, c1)])
            labels.extend([self.label_box_tl, self.label_box_br])
        with region("prompt-encoder"):
            label_rows = ops.concat([ops.reshape(lab, (1, self.dim)) for lab in labels], axis=0)
            return Tensor(self.positional(points)) + label_rows


class TwoWayLayer(Module):
    def __init__(self, cfg: DecoderConfig, *, rng: np.random.Generator | None, dtype: np.dtype[Any]) -> None:
        dim = cfg.token_dim
        tags = {"decoder"}
        self.self_attn = Attention(dim, cfg.heads, rng=rng, dtype=dtype, tags=tags)
        self.norm1 = LayerNorm(dim, dtype=dtype, tags=tags)
        self.cross_token_to_image = Attention(dim, cfg.heads, rng=rng, dtype=dtype, tags=tags)
        self.norm2 = LayerNorm(dim, dtype=dtype, tags=tags)
        self.mlp = [
            Linear(dim, cfg.mlp_dim, rng=rng, dtype=dtype, tags=tags),
            Linear(cfg.mlp_dim, dim, rng=rng, dtype=dtype, tags=tags),
        ]
        self.norm3 = LayerNorm(dim, dtype=dtype, tags=tags)
        self.cross_image_to_token = Attention(dim, cfg.heads, rng=rng, dtype=dtype, tags=tags)
        self.norm4 = LayerNorm(dim, dtype=dtype, tags=tags)

    def forward(self, tokens: Tensor, image: Tensor, token_pe: Tensor, image_pe: Tensor) -> tuple[Tensor, Tensor]:
        q = tokens + token_pe
        tokens = self.norm1(tokens + self.self_attn(q, q, tokens))
        q = tokens + token_pe
        tokens = self.norm2(tokens + self.cross_token_to_image(q, image + image_pe, image))
        tokens = self.norm3(tokens + mlp_relu(tokens, self.mlp))
        q = tokens + token_pe
        image = self.norm4(image + self.cross_image_to_token(image + image_pe, q, tokens))
        return tokens, image


class MaskDecoder(Module):
    """Two-way attention between prompt tokens and image tokens, then learned upsampling."""

    def __init__(
        self, cfg: DecoderConfig, grid: int, image_size: int, *, rng: np.random.Generator | None, dtype: np.dtype[Any]
    ) -> None:
        dim = cfg.token_dim
        tags = {"decoder"}
        self.grid = grid
        self.image_size = image_size
        self.dim = dim
        init = np.zeros((1, dim)) if rng is None else rng.normal(0.0, 0.02, (1, dim))
        self.mask_token = Parameter(init.astype(dtype), {"embedding", "decoder"})
        self.layers = [TwoWayLayer(cfg, rng=rng, dtype=dtype) for _ in range(cfg.cross_attention_layers)]
        self.final_attn = Attention(dim, cfg.heads, rng=rng, dtype=dtype, tags=tags)
        self.final_norm = LayerNorm(dim, dtype=dtype, tags=tags)
        self.upscale1 = ConvTranspose2d(dim, dim // 4, rng=rng, dtype=dtype, tags=tags)
        self.upscale_norm = LayerNorm(dim // 4, dtype=dtype, tags=tags)
        self.upscale2 = ConvTranspose2d(dim // 4, dim // 8, rng=rng, dtype=dtype, tags=tags)
        self.hypernet = [
            Linear(dim, dim, rng=rng, dtype=dtype, tags=tags),
            Linear(dim, dim, rng=rng, dtype=dtype, tags=tags),
            Linear(dim, dim // 8, rng=rng, dtype=dtype, tags=tags),
        ]
        centres = (np.arange(grid) + 0.5) / grid
        rows, cols = np.meshgrid(centres, centres, indexing="ij")
        self._image_pe = sinusoidal_encoding(rows.reshape(-1), cols.reshape(-1), dim).astype(dtype)

    def forward(self, features: Tensor, prompt_tokens: Tensor) -> Tensor:
        g, dim = self.grid, self.dim
        if features.shape != (g, g, dim):
            raise ShapeError("decode_mask", features.shape, (g, g, dim), detail="features vs decoder config")
        if prompt_tokens.ndim != 2 or prompt_tokens.shape[1] != dim:
            raise ShapeError("decode_mask", prompt_tokens.shape, (-1, dim), detail="prompt tokens")
        with region("decoder"):
            tokens0 = ops.concat([self.mask_token, prompt_tokens], axis=0)
            image = ops.reshape(features, (g * g, dim))
            image_pe = Tensor(self._image_pe)
            tokens = tokens0
            for layer in self.layers:
                tokens, image = layer(tokens, image, tokens0, image_pe)
            q = tokens + tokens0
            tokens = self.final_norm(tokens + self.final_attn(q, image + image_pe, image))

            grid_map = ops.reshape(image, (g, g, dim))
            up = ops.gelu(self.upscale_norm(self.upscale1(grid_map)))
            up = ops.gelu(self.upscale2(up))
            weights = mlp_relu(tokens[0:1], self.hypernet)  # (1, dim/8)
            low = ops.reshape(ops.reshape(up, (16 * g * g, dim // 8)) @ ops.transpose(weights), (4 * g, 4 * g, 1))
            logits = ops.upsample_bilinear(low, (self.image_size, self.image_size))
            return ops.reshape(logits, (self.image_size, self.image_size))


class UpStage(Module):
    def __init__(self, c_in: int, c: int, *, rng: np.random.Generator | None, dtype: np.dtype[Any]) -> None:
        tags = {"head"}
        self.conv_a = Conv2d(c_in, c, 3, padding=1, rng=rng, dtype=dtype, tags=tags)
        self.conv_b = Conv2d(c, c, 3, padding=1, rng=rng, dtype=dtype, tags=tags)
        self.up = ConvTranspose2d(c, c, rng=rng, dtype=dtype, tags=tags)

    def forward(self, x: Tensor) -> Tensor:
        return self.up(ops.relu(self.conv_b(ops.relu(self.conv_a(x)))))


class InstanceHead(Module):
    """
    Four upsampling stages (conv3x3, conv3x3, 2x transposed conv), each also fed the
    encoder output resized to its resolution, then a 1x1 conv to three sigmoid channels.
    """

    def __init__(
        self,
        feature_dim: int,
        channels: tuple[int, int, int, int],
        grid: int,
        image_size: int,
        *,
        rng: np.random.Generator | None,
        dtype: np.dtype[Any],
    ) -> None:
        if grid * 16 != image_size:
            raise ConfigError(
                f"instance head needs image_size == 16 * grid (4 doublings); got grid {grid}, image {image_size}"
            )
        self.stages: list[UpStage] = []
        c_prev = feature_dim
        for k, c in enumerate(channels):
            c_in = c_prev if k == 0 else c_prev + feature_dim
            self.stages.append(UpStage(c_in, c, rng=rng, dtype=dtype))
            c_prev = c
        self.out = Conv2d(c_prev, 3, 1, rng=rng, dtype=dtype, tags={"head"})

    def forward(self, features: Tensor) -> Tensor:
        with region("head"):
            x = features
            for k, stage in enumerate(self.stages):
                if k > 0:
                    x = ops.concat([x, ops.upsample_nearest(features, 2**k)], axis=-1)
                x = stage(x)
            return ops.sigmoid(self.out(x))


class PromptableModel(Protocol):
    """What the interactive protocol needs from a model."""

    training: bool

    def encode(self, image: Tensor) -> Tensor: ...

    def predict_mask(self, features: Tensor, prompts: PromptSet) -> Tensor: ...

    def predict_instances(self, features: Tensor) -> Tensor: ...


class SamLite(Module):
    """Encoder, prompt encoder, mask decoder and instance head."""

    def __init__(
        self,
        vit: VitConfig,
        decoder: DecoderConfig,
        seed: int = 0,
        dtype: Any = np.float32,
        materialized: bool = True,
    ) -> None:
        self.vit, self.decoder = vit, decoder
        self.seed = seed
        self.dtype: np.dtype[Any] = np.dtype(dtype)
        self.materialized = materialized
        dec = decoder
        if vit.neck_dim != dec.token_dim:
            raise ConfigError(f"encoder neck_dim {vit.neck_dim} must equal decoder token_dim {dec.token_dim}")
        rng = np.random.default_rng(self.seed) if self.materialized else None
        self.encoder = ImageEncoder(vit, rng=rng, dtype=self.dtype)
        self.prompt_encoder = PromptEncoder(dec.token_dim, vit.image_size, rng=rng, dtype=self.dtype)
        self.mask_decoder = MaskDecoder(dec, vit.grid, vit.image_size, rng=rng, dtype=self.dtype)
        self.instance_head = InstanceHead(
            vit.neck_dim, dec.instance_channels, vit.grid, vit.image_size, rng=rng, dtype=self.dtype
        )
        self.peft: PeftConfig | None = None

    @property
    def image_size(self) -> int:
        return self.vit.image_size

    def encode(self, image: Tensor) -> Tensor:
        return self.encoder.encode_image(image)

    def encode_prompts(self, prompts: PromptSet) -> Tensor:
        return self.prompt_encoder(prompts)

    def decode_mask(self, features: Tensor, prompt_tokens: Tensor) -> Tensor:
        return self.mask_decoder(features, prompt_tokens)

    def predict_mask(self, features: Tensor, prompts: PromptSet) -> Tensor:
        return self.decode_mask(features, self.encode_prompts(prompts))

    def predict_instances(self, features: Tensor) -> Tensor:
        return self.instance_head(features)

    def instance_head_forward(self, features: Tensor) -> InstanceHeadOutput:
        return InstanceHeadOutput.from_array(self.predict_instances(features).data)


def build_model(
    preset: str, *, seed: int = 0, dtype: Any = np.float32, materialize: bool | None = None
) -> SamLite:
    """Build a model from a named preset; large presets are built with zero weights for counting."""
    if preset not in VIT_PRESETS:
        raise ConfigError(unknown_choice_message("preset", preset, VIT_PRESETS))
    if materialize is None:
        materialize = preset not in COUNT_ONLY_PRESETS
    return SamLite(VIT_PRESETS[preset], DECODER_PRESETS[preset], seed, np.dtype(dtype), materialize)


def build_custom(vit: dict[str, Any], decoder: dict[str, Any], *, seed: int = 0, dtype: Any = np.float32) -> SamLite:
    return SamLite(parse_model(VitConfig, vit), parse_model(DecoderConfig, decoder), seed, np.dtype(dtype))

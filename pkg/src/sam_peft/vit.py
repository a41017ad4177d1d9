"""
Plain-attention ViT image encoder with a SAM-style convolutional neck.

Tokens are (seq, d) with seq = (image_size / patch_size) ** 2; the neck maps the
token grid to a (grid, grid, neck_dim) feature map.
"""

from __future__ import annotations

import logging
from typing import Any, Self

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from . import ops
from .errors import NumericalError, ShapeError
from .nn import Conv2d, LayerNorm, Linear, Module, Parameter, trunc_normal
from .tensor import Array, Tensor, no_grad, region

logger = logging.getLogger(__name__)


class VitConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    image_size: int = 128
    patch_size: int = 16
    embed_dim: int = 64
    depth: int = 8
    heads: int = 4
    mlp_ratio: int = 4
    neck_dim: int = 32
    in_channels: int = 1

    @model_validator(mode="after")
    def _check(self) -> Self:
        if min(self.image_size, self.patch_size, self.embed_dim, self.heads, self.neck_dim, self.in_channels) <= 0:
            raise ValueError("sizes must be positive")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} is not a multiple of patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.mlp_ratio < 1:
            raise ValueError("mlp_ratio must be >= 1")
        return self

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def seq_len(self) -> int:
        return self.grid * self.grid


VIT_PRESETS: dict[str, VitConfig] = {
    # Desk-scale: 8x8 token grid, eight blocks so late fractions 0.08/0.25/0.5 stay distinct.
    "toy": VitConfig(),
    "vit-b-shape": VitConfig(
        image_size=1024, patch_size=16, embed_dim=768, depth=12, heads=12, neck_dim=256, in_channels=3
    ),
    "vit-l-shape": VitConfig(
        image_size=1024, patch_size=16, embed_dim=1024, depth=24, heads=16, neck_dim=256, in_channels=3
    ),
    "vit-h-shape": VitConfig(
        image_size=1024, patch_size=16, embed_dim=1280, depth=32, heads=16, neck_dim=256, in_channels=3
    ),
}


def ssf_points(cfg: VitConfig) -> dict[str, int]:
    """Points inside a block whose outputs SSF scales and shifts, with their channel counts."""
    d = cfg.embed_dim
    return {"norm1": d, "qkv": 3 * d, "attn_proj": d, "norm2": d, "mlp_fc1": cfg.mlp_ratio * d, "mlp_fc2": d}


class Block(Module):
    """Pre-norm transformer block: x + Attn(LN(x)), then + MLP(LN(.))."""

    def __init__(self, cfg: VitConfig, index: int, *, rng: np.random.Generator | None, dtype: np.dtype[Any]) -> None:
        d = cfg.embed_dim
        self.index = index
        self.heads = cfg.heads
        self.norm1 = LayerNorm(d, dtype=dtype)
        self.qkv = Linear(d, 3 * d, rng=rng, dtype=dtype, tags={"attention"})
        self.attn_proj = Linear(d, d, rng=rng, dtype=dtype, tags={"attention"})
        self.norm2 = LayerNorm(d, dtype=dtype)
        self.mlp_fc1 = Linear(d, cfg.mlp_ratio * d, rng=rng, dtype=dtype, tags={"mlp"})
        self.mlp_fc2 = Linear(cfg.mlp_ratio * d, d, rng=rng, dtype=dtype, tags={"mlp"})
        # Filled by PEFT methods that hook into the block.
        self.ssf: dict[str, Module] = {}
        self.adaptformer: Module | None = None

    @property
    def region(self) -> str:
        return f"encoder-block-{self.index}"

    def _tap(self, point: str, y: Tensor) -> Tensor:
        hook = self.ssf.get(point)
        return y if hook is None else hook(y)

    def _attention_probs(self, qkv: Tensor) -> tuple[Tensor, Tensor]:
        s, three_d = qkv.shape
        d = three_d // 3
        hd = d // self.heads
        # (s, 3, heads, hd) -> (3, heads, s, hd)
        parts = ops.transpose(ops.reshape(qkv, (s, 3, self.heads, hd)), (1, 2, 0, 3))
        q, k, v = parts[0], parts[1], parts[2]
        scores = (q @ ops.transpose(k, (0, 2, 1))) * (1.0 / float(np.sqrt(hd)))
        return ops.softmax(scores, axis=-1), v

    def attention(self, qkv: Tensor) -> Tensor:
        probs, v = self._attention_probs(qkv)
        out = ops.transpose(probs @ v, (1, 0, 2))
        return ops.reshape(out, (qkv.shape[0], qkv.shape[1] // 3))

    def attention_probs(self, x: Tensor) -> Array:
        """Per-head attention weights (heads, seq, seq) for input tokens `x`."""
        with no_grad():
            probs, _ = self._attention_probs(self._tap("qkv", self.qkv(self._tap("norm1", self.norm1(x)))))
        return probs.data

    def forward(self, x: Tensor) -> Tensor:
        with region(self.region):
            h = self._tap("norm1", self.norm1(x))
            qkv = self._tap("qkv", self.qkv(h))
            x = x + self._tap("attn_proj", self.attn_proj(self.attention(qkv)))

            h = self._tap("norm2", self.norm2(x))
            hidden = ops.gelu(self._tap("mlp_fc1", self.mlp_fc1(h)))
            mlp = self._tap("mlp_fc2", self.mlp_fc2(hidden))
            if self.adaptformer is not None:
                mlp = mlp + self.adaptformer(h)
            return x + mlp


class ImageEncoder(Module):
    def __init__(self, cfg: VitConfig, *, rng: np.random.Generator | None, dtype: np.dtype[Any]) -> None:
        self.config = cfg
        d = cfg.embed_dim
        self.proj = Conv2d(
            cfg.in_channels, d, cfg.patch_size, stride=cfg.patch_size, rng=rng, dtype=dtype, tags={"embedding"}
        )
        pos = np.zeros((cfg.seq_len, d), dtype=dtype) if rng is None else trunc_normal(rng, (cfg.seq_len, d), 0.02, dtype)
        self.pos_embed = Parameter(pos, {"embedding"})
        self.blocks = [Block(cfg, i, rng=rng, dtype=dtype) for i in range(cfg.depth)]
        self.neck_conv1 = Conv2d(d, cfg.neck_dim, 1, rng=rng, dtype=dtype, bias=False, tags={"neck"})
        self.neck_norm1 = LayerNorm(cfg.neck_dim, dtype=dtype, tags={"neck"})
        self.neck_conv2 = Conv2d(
            cfg.neck_dim, cfg.neck_dim, 3, padding=1, rng=rng, dtype=dtype, bias=False, tags={"neck"}
        )
        self.neck_norm2 = LayerNorm(cfg.neck_dim, dtype=dtype, tags={"neck"})
        # Shared FacT factors, when that method is applied.
        self.fact: Module | None = None

    def patch_embed(self, image: Tensor) -> Tensor:
        cfg = self.config
        expected = (cfg.image_size, cfg.image_size, cfg.in_channels)
        if image.shape != expected:
            raise ShapeError("patch_embed", image.shape, expected, detail="image does not match encoder config")
        with region("patch-embed"):
            grid = self.proj(image)
            return ops.reshape(grid, (cfg.seq_len, cfg.embed_dim)) + self.pos_embed

    def neck(self, tokens: Tensor) -> Tensor:
        cfg = self.config
        with region("neck"):
            x = ops.reshape(tokens, (cfg.grid, cfg.grid, cfg.embed_dim))
            x = self.neck_norm1(self.neck_conv1(x))
            return self.neck_norm2(self.neck_conv2(x))

    def encode_image(self, image: Tensor) -> Tensor:
        x = self.patch_embed(image)
        for block in self.blocks:
            x = block(x)
            if np.isnan(x.data).any():
                raise NumericalError(f"NaN in the output of encoder block {block.index}")
        return self.neck(x)

    forward = encode_image


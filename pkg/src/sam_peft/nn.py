from __future__ import annotations

from collections.abc import Iterable, Iterator
from typing import Any, Self

import numpy as np

from . import ops
from .tensor import Array, Tensor

# Role tags that method selection understands.
KNOWN_TAGS = frozenset(
    {"weight", "bias", "norm", "attention", "mlp", "embedding", "neck", "adapter", "prompt", "decoder", "head"}
)


class Parameter(Tensor):
    """A trainable leaf carrying role tags ("bias", "norm", "attention", ...)."""

    __slots__ = ("tags",)

    def __init__(self, data: Array, tags: Iterable[str], *, requires_grad: bool = True) -> None:
        super().__init__(data, requires_grad=requires_grad, param_like=True)
        self.tags: frozenset[str] = frozenset(tags)


class Module:
    training: bool = True

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def _named_members(self) -> Iterator[tuple[str, Any]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, list | tuple):
                for i, item in enumerate(value):  # pyright: ignore[reportUnknownVariableType, reportUnknownArgumentType]
                    yield f"{name}.{i}", item
            elif isinstance(value, dict):
                for key, item in value.items():  # pyright: ignore[reportUnknownVariableType]
                    yield f"{name}.{key}", item
            else:
                yield name, value

    def named_children(self) -> Iterator[tuple[str, Module]]:
        for name, value in self._named_members():
            if isinstance(value, Module):
                yield name, value

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix, self
        for name, child in self.named_children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        """Parameters and buffers (e.g. packed weights), in definition order, without duplicates."""
        seen: set[int] = set()
        for mod_name, module in self.named_modules(prefix):
            for name, value in module._named_members():
                if isinstance(value, Tensor) and id(value) not in seen:
                    seen.add(id(value))
                    yield (f"{mod_name}.{name}" if mod_name else name), value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, t in self.named_tensors(prefix):
            if isinstance(t, Parameter):
                yield name, t

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def train(self, mode: bool = True) -> Self:
        for _, module in self.named_modules():
            module.training = mode
        return self

    def eval(self) -> Self:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def trunc_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float, dtype: np.dtype[Any]) -> Array:
    return (np.clip(rng.standard_normal(shape), -2.0, 2.0) * std).astype(dtype)


def _init(rng: np.random.Generator | None, shape: tuple[int, ...], std: float, dtype: np.dtype[Any]) -> Array:
    # rng=None builds zero weights: count-only models and checkpoint restores.
    if rng is None:
        return np.zeros(shape, dtype=dtype)
    return trunc_normal(rng, shape, std, dtype)


class Linear(Module):
    """y = x @ W + b, plus an optional additive `adapter` path computed from x."""

    def __init__(
        self,
        d_in: int,
        d_out: int,
        *,
        rng: np.random.Generator | None,
        dtype: np.dtype[Any],
        tags: Iterable[str] = (),
        bias: bool = True,
        std: float = 0.02,
    ) -> None:
        extra = frozenset(tags)
        self.d_in, self.d_out = d_in, d_out
        self.weight = Parameter(_init(rng, (d_in, d_out), std, dtype), {"weight", *extra})
        self.bias = Parameter(np.zeros(d_out, dtype=dtype), {"bias", *extra}) if bias else None
        self.adapter: Module | None = None

    def base(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y if self.bias is None else y + self.bias

    def forward(self, x: Tensor) -> Tensor:
        y = self.base(x)
        if self.adapter is not None:
            y = y + self.adapter(x)
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, *, dtype: np.dtype[Any], eps: float = 1e-6, tags: Iterable[str] = ()) -> None:
        self.eps = eps
        self.weight = Parameter(np.ones(dim, dtype=dtype), {"norm", *tags})
        self.bias = Parameter(np.zeros(dim, dtype=dtype), {"norm", *tags})

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class Conv2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        *,
        rng: np.random.Generator | None,
        dtype: np.dtype[Any],
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
        tags: Iterable[str] = (),
    ) -> None:
        self.stride, self.padding = stride, padding
        fan_in = kernel * kernel * c_in
        self.weight = Parameter(
            _init(rng, (kernel, kernel, c_in, c_out), (2.0 / fan_in) ** 0.5, dtype), {"weight", *tags}
        )
        self.bias = Parameter(np.zeros(c_out, dtype=dtype), {"bias", *tags}) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        *,
        rng: np.random.Generator | None,
        dtype: np.dtype[Any],
        kernel: int = 2,
        stride: int = 2,
        tags: Iterable[str] = (),
    ) -> None:
        self.stride = stride
        self.weight = Parameter(
            _init(rng, (kernel, kernel, c_in, c_out), (1.0 / c_in) ** 0.5, dtype), {"weight", *tags}
        )
        self.bias = Parameter(np.zeros(c_out, dtype=dtype), {"bias", *tags})

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, stride=self.stride)


class Attention(Module):
    """Multi-head attention with separate q/k/v projections (used by the mask decoder)."""

    def __init__(
        self, dim: int, heads: int, *, rng: np.random.Generator | None, dtype: np.dtype[Any], tags: Iterable[str] = ()
    ) -> None:
        self.heads = heads
        tags = {"attention", *tags}
        self.q_proj = Linear(dim, dim, rng=rng, dtype=dtype, tags=tags)
        self.k_proj = Linear(dim, dim, rng=rng, dtype=dtype, tags=tags)
        self.v_proj = Linear(dim, dim, rng=rng, dtype=dtype, tags=tags)
        self.out_proj = Linear(dim, dim, rng=rng, dtype=dtype, tags=tags)

    def _split(self, x: Tensor) -> Tensor:
        n, d = x.shape
        return ops.transpose(ops.reshape(x, (n, self.heads, d // self.heads)), (1, 0, 2))

    def forward(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(k))
        vh = self._split(self.v_proj(v))
        scale = 1.0 / float(np.sqrt(qh.shape[-1]))
        probs = ops.softmax((qh @ ops.transpose(kh, (0, 2, 1))) * scale, axis=-1)
        out = ops.transpose(probs @ vh, (1, 0, 2))
        return self.out_proj(ops.reshape(out, (q.shape[0], q.shape[1])))


def mlp_relu(x: Tensor, layers: list[Linear]) -> Tensor:
    """Stack of linears with ReLU between them (not after the last)."""
    for i, layer in enumerate(layers):
        x = layer(x)
        if i < len(layers) - 1:
            x = ops.relu(x)
    return x

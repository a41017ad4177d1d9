"""
Dense tensors with reverse-mode gradients.

Every differentiable primitive (see `ops.py`) that receives at least one input with
`requires_grad` appends a `Record` to the active `Tape`. A record keeps the arrays its
backward rule needs ("saved" arrays); the tape sums their sizes so the activation
ledger can say how many bytes a training step retains for the backward pass.

Tensors whose inputs are all parameters (or constants) are marked `param_like`: their
saved arrays are weights, not activations, and are left out of the retained-byte count.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any

import numpy as np
import numpy.typing as npt

from .errors import ShapeError, TapeError

Array = npt.NDArray[Any]
BackwardFn = Callable[[Array, tuple[bool, ...]], tuple[Array | None, ...]]


class DType(IntEnum):
    """Element types; the integer value is the on-disk dtype code."""

    F32 = 0
    F64 = 1
    U32 = 2
    PACKED_U4 = 3

    @property
    def is_float(self) -> bool:
        return self in (DType.F32, DType.F64)

    @property
    def numpy(self) -> np.dtype[Any]:
        return np.dtype(_NUMPY_DTYPES[self])

    @classmethod
    def from_numpy(cls, dtype: npt.DTypeLike) -> DType:
        dt = np.dtype(dtype)
        for code, name in _NUMPY_DTYPES.items():
            if code is not DType.PACKED_U4 and np.dtype(name) == dt:
                return code
        raise TypeError(f"no tensor dtype for numpy dtype {dt}")


_NUMPY_DTYPES: dict[DType, str] = {
    DType.F32: "float32",
    DType.F64: "float64",
    DType.U32: "uint32",
    DType.PACKED_U4: "uint8",
}


def packed_length(shape: Sequence[int]) -> int:
    """Bytes needed for `shape` elements at two elements per byte."""
    return (math.prod(shape) + 1) // 2


class Tensor:
    __slots__ = ("data", "shape", "dtype", "_requires_grad", "grad", "name", "param_like", "_record")

    def __init__(
        self,
        data: Array | float | Sequence[Any],
        *,
        requires_grad: bool = False,
        dtype: DType | None = None,
        shape: Sequence[int] | None = None,
        name: str = "",
        param_like: bool = False,
    ) -> None:
        if dtype is DType.PACKED_U4:
            if shape is None:
                raise ShapeError("tensor", (), detail="packed-u4 tensors need an explicit shape")
            arr = np.asarray(data, dtype=np.uint8).reshape(-1)
            logical = tuple(int(s) for s in shape)
            if arr.size != packed_length(logical):
                raise ShapeError(
                    "tensor", logical, arr.shape, detail="packed payload length mismatch"
                )
        else:
            arr = np.asarray(data)
            if dtype is not None:
                arr = arr.astype(dtype.numpy, copy=False)
            elif arr.dtype != np.uint32 and (arr.dtype.kind in "iub" or arr.dtype == np.float16):
                arr = arr.astype(np.float32)
            dtype = DType.from_numpy(arr.dtype)
            logical = tuple(int(s) for s in arr.shape)
        if any(s <= 0 for s in logical):
            raise ShapeError("tensor", logical, detail="extents must be positive")

        self.data: Array = arr
        self.shape: tuple[int, ...] = logical
        self.dtype: DType = dtype
        self._requires_grad = False
        self.grad: Array | None = None
        self.name = name
        self.param_like = param_like
        self._record: Record | None = None
        if requires_grad:
            self.requires_grad = True

    # --- trainability ---

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, value: bool) -> None:
        if value and not self.dtype.is_float:
            raise TapeError(
                f"tensor {self.name or '<unnamed>'} has dtype {self.dtype.name} and cannot be trainable"
            )
        if not value and self._record is not None:
            raise TapeError("cannot freeze a non-leaf tensor")
        self._requires_grad = value

    @property
    def is_leaf(self) -> bool:
        return self._record is None

    # --- shape helpers ---

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return int(self.data.nbytes)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError("item", self.shape, detail="only single-element tensors")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> Array:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # --- operator sugar (implemented in ops.py) ---

    def __add__(self, other: Tensor | float) -> Tensor:
        from . import ops

        return ops.add(self, other)

    def __radd__(self, other: float) -> Tensor:
        from . import ops

        return ops.add(other, self)

    def __sub__(self, other: Tensor | float) -> Tensor:
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other: float) -> Tensor:
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other: Tensor | float) -> Tensor:
        from . import ops

        return ops.mul(self, other)

    def __rmul__(self, other: float) -> Tensor:
        from . import ops

        return ops.mul(other, self)

    def __truediv__(self, other: Tensor | float) -> Tensor:
        from . import ops

        return ops.div(self, other)

    def __neg__(self) -> Tensor:
        from . import ops

        return ops.neg(self)

    def __matmul__(self, other: Tensor) -> Tensor:
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, key: Any) -> Tensor:
        from . import ops

        return ops.getitem(self, key)

    def reshape(self, *shape: int) -> Tensor:
        from . import ops

        return ops.reshape(self, shape)

    def transpose(self, *axes: int) -> Tensor:
        from . import ops

        return ops.transpose(self, axes or None)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        from . import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)


# --- tape ---


def _buffer_key(arr: Array) -> tuple[int, int]:
    # Views over the same memory (reshape, transpose) share data pointer and size.
    return (int(arr.__array_interface__["data"][0]), int(arr.nbytes))


@dataclass(eq=False)
class Record:
    index: int
    op: str
    region: str
    inputs: tuple[Tensor, ...]
    output: Tensor | None
    saved: tuple[Array, ...]
    backward_fn: BackwardFn | None
    tape: Tape
    retained_bytes: int = 0


class Tape:
    """Ordered log of primitive applications for one forward pass."""

    def __init__(self) -> None:
        self.records: list[Record] = []
        self.consumed = False
        self._seen: set[tuple[int, int]] = set()
        self._tokens: list[Any] = []

    def __enter__(self) -> Tape:
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc: object) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.records)

    @property
    def total_retained_bytes(self) -> int:
        return sum(r.retained_bytes for r in self.records)

    def append(
        self,
        op: str,
        inputs: tuple[Tensor, ...],
        output: Tensor,
        saved: tuple[Array, ...],
        backward_fn: BackwardFn,
    ) -> Record:
        if self.consumed:
            raise TapeError("tape was already consumed by backward(); run a new forward pass")
        weights = {_buffer_key(t.data) for t in inputs if t.param_like}
        retained = 0
        for arr in saved:
            key = _buffer_key(arr)
            if key in weights or key in self._seen:
                continue
            self._seen.add(key)
            retained += int(arr.nbytes)
        record = Record(
            index=len(self.records),
            op=op,
            region=_REGION.get(),
            inputs=inputs,
            output=output,
            saved=saved,
            backward_fn=backward_fn,
            tape=self,
            retained_bytes=retained,
        )
        self.records.append(record)
        return record

    def release(self) -> None:
        """Drop saved arrays and graph references; byte counts stay for the ledger."""
        for r in self.records:
            r.saved = ()
            r.backward_fn = None
            r.inputs = ()
            r.output = None
        self._seen.clear()


_ACTIVE_TAPE: ContextVar[Tape | None] = ContextVar("sam_peft_active_tape", default=None)
_IMPLICIT: ContextVar[Tape | None] = ContextVar("sam_peft_implicit_tape", default=None)
_GRAD_ENABLED: ContextVar[bool] = ContextVar("sam_peft_grad_enabled", default=True)
_REGION: ContextVar[str] = ContextVar("sam_peft_region", default="untagged")


def current_tape() -> Tape:
    """The tape ops record into: an explicitly entered one, else a fresh implicit one."""
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        return tape
    implicit = _IMPLICIT.get()
    if implicit is None or implicit.consumed:
        implicit = Tape()
        _IMPLICIT.set(implicit)
    return implicit


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


@contextmanager
def no_grad() -> Iterator[None]:
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


@contextmanager
def region(tag: str) -> Iterator[None]:
    """Tag every record created inside the block with a model region."""
    token = _REGION.set(tag)
    try:
        yield
    finally:
        _REGION.reset(token)


def current_region() -> str:
    return _REGION.get()


def make_result(
    op: str,
    out: Array,
    inputs: Sequence[Tensor],
    saved: tuple[Array, ...],
    backward_fn: BackwardFn,
) -> Tensor:
    """Wrap a primitive's output and record it when any input requires grad."""
    inputs = tuple(inputs)
    result = Tensor(out, param_like=bool(inputs) and all(t.param_like for t in inputs))
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        result._record = current_tape().append(op, inputs, result, saved, backward_fn)
        result._requires_grad = True
    return result


def _accumulate(leaf: Tensor, g: Array) -> None:
    g = np.asarray(g, dtype=leaf.data.dtype)
    if g.shape != leaf.shape:
        raise ShapeError("backward", leaf.shape, g.shape, detail=f"gradient for {leaf.name!r}")
    if leaf.grad is None:
        leaf.grad = g.copy()
    else:
        leaf.grad = leaf.grad + g


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(leaf) into `.grad` of every trainable leaf that reaches `loss`."""
    if loss.size != 1:
        raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    record = loss._record
    if record is None:
        raise TapeError("loss was not produced on a tape (no trainable input reaches it)")
    tape = record.tape
    if tape.consumed:
        raise TapeError("backward() was already run for this forward pass")

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for r in reversed(tape.records[: record.index + 1]):
        if r.output is None or r.backward_fn is None:
            continue
        g = grads.pop(id(r.output), None)
        if g is None:
            continue
        needs = tuple(t.requires_grad for t in r.inputs)
        input_grads = r.backward_fn(g, needs)
        for t, gi, need in zip(r.inputs, input_grads, needs, strict=True):
            if not need or gi is None:
                continue
            if t.is_leaf:
                _accumulate(t, gi)
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi

    tape.consumed = True
    tape.release()


@dataclass
class GradState:
    """Snapshot of `.grad` fields, used by tools that must not disturb training state."""

    grads: dict[int, Array | None] = field(default_factory=lambda: {})

    @classmethod
    def capture(cls, tensors: Sequence[Tensor]) -> GradState:
        return cls({id(t): t.grad for t in tensors})

    def restore(self, tensors: Sequence[Tensor]) -> None:
        for t in tensors:
            t.grad = self.grads.get(id(t))

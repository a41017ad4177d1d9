from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .nn import Parameter
from .tensor import Array


@dataclass
class _Moments:
    m: Array
    v: Array


class Adam:
    """Adam over the trainable parameters only; frozen tensors are never touched."""

    def __init__(
        self,
        params: Sequence[Parameter],
        *,
        lr: float = 1e-5,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self._state: dict[int, _Moments] = {}

    def state_bytes(self) -> int:
        """Two moment buffers per trainable element."""
        return sum(2 * p.nbytes for p in self.params)

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1**t
        bias2 = 1.0 - self.beta2**t
        for p in self.params:
            if p.grad is None:
                continue
            st = self._state.get(id(p))
            if st is None:
                st = _Moments(np.zeros_like(p.data), np.zeros_like(p.data))
                self._state[id(p)] = st
            g = p.grad
            st.m *= self.beta1
            st.m += (1.0 - self.beta1) * g
            st.v *= self.beta2
            st.v += (1.0 - self.beta2) * (g * g)
            update = self.lr * (st.m / bias1) / (np.sqrt(st.v / bias2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

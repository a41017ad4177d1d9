from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError
from .tensor import DType, Tensor, backward, no_grad

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GradCheckResult:
    max_error: float
    errors: dict[str, float]

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_error <= tol


def grad_check(
    program: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    *,
    eps: float = 1e-6,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """
    Compare tape gradients of a scalar program with central differences.

    The error per element is |analytic - numeric| / max(1, |analytic|). Frozen
    tensors are reported with error 0.0; their `.grad` must stay empty.
    """
    for name, p in params:
        if p.requires_grad and p.dtype is not DType.F64:
            raise ConfigError(f"grad_check needs f64 parameters; {name} is {p.dtype.name}")
        p.grad = None

    loss = program()
    backward(loss)
    rng = rng or np.random.default_rng(0)

    errors: dict[str, float] = {}
    for name, p in params:
        if not p.requires_grad:
            if p.grad is not None:
                errors[name] = float("inf")
                logger.warning("frozen tensor %s received a gradient", name)
            else:
                errors[name] = 0.0
            continue
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            indices = rng.choice(flat.size, size=max_elements, replace=False)
        worst = 0.0
        with no_grad():
            for i in indices:
                orig = flat[i]
                flat[i] = orig + eps
                plus = program().item()
                flat[i] = orig - eps
                minus = program().item()
                flat[i] = orig
                numeric = (plus - minus) / (2 * eps)
                if not np.isfinite(numeric):
                    raise NumericalError(f"non-finite finite difference for {name}[{int(i)}]")
                a = float(analytic.reshape(-1)[i])
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
        errors[name] = worst

    return GradCheckResult(max(errors.values(), default=0.0), errors)

"""Finite-difference verification of tape gradients.

Checks run in float64: the point is upcast, the function re-evaluated, and
central differences with a fixed step are compared coordinate-wise against
the tape gradient. The relative error uses a hybrid denominator
``max(|g|, |fd|, 1.0)`` so near-zero gradients are judged absolutely.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError
from .tensor import Tensor, backward, clear_tape, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    worst_coord: tuple
    n_coords: int
    passed: bool

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"gradcheck {status}: max_rel={self.max_rel_error:.3e} "
                f"mean_rel={self.mean_rel_error:.3e} worst={self.worst_coord}")


def gradient_check(f: Callable[[Tensor], Tensor], point: Tensor,
                   step: float = 1e-4, tol: float = 1e-5) -> GradCheckReport:
    """Compare the tape gradient of scalar-valued ``f`` at ``point`` against
    central differences. Clears the active tape as a side effect."""
    if step <= 0:
        raise ContractError(f"step must be positive, got {step}")
    base = np.asarray(point.data, dtype=np.float64).copy()

    clear_tape()
    x = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
    loss = f(x)
    if loss.size != 1:
        raise ContractError(f"gradient_check requires a scalar function, got shape {loss.shape}")
    backward(loss)
    analytic = np.zeros_like(base) if x.grad is None else np.asarray(x.grad, dtype=np.float64)
    clear_tape()

    fd = np.zeros_like(base)
    with no_grad():
        for idx in np.ndindex(base.shape):
            bump = base.copy()
            bump[idx] = base[idx] + step
            hi = f(Tensor(bump, dtype=np.float64)).item()
            bump[idx] = base[idx] - step
            lo = f(Tensor(bump, dtype=np.float64)).item()
            fd[idx] = (hi - lo) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1.0)
    errs = np.abs(analytic - fd) / denom
    worst = np.unravel_index(int(np.argmax(errs)), errs.shape) if errs.size else ()
    max_err = float(errs.max()) if errs.size else 0.0
    return GradCheckReport(
        max_rel_error=max_err,
        mean_rel_error=float(errs.mean()) if errs.size else 0.0,
        worst_coord=tuple(int(i) for i in worst),
        n_coords=int(base.size),
        passed=max_err <= tol,
    )

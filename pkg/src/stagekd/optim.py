"""SGD with classical momentum and decoupled-from-nothing weight decay.

The update, per parameter:

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v

Weight decay folds into the velocity (the usual L2 formulation), not the
decoupled variant.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError
from .tensor import Parameter


class SGDMomentum:
    """Stateful SGD; velocities start at zero and persist across steps."""

    def __init__(self, params: Sequence[Parameter], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        sgd_momentum_step(self.params, self.velocity, self.lr, self.momentum,
                          self.weight_decay)

    def zero_grads(self) -> None:
        zero_grads(self.params)


def sgd_momentum_step(params: Sequence[Parameter], velocity: dict, lr: float,
                      momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """One in-place update over ``params``; ``velocity`` maps name -> buffer.

    Missing velocity buffers are created at zero. Grads are left untouched;
    zeroing is the caller's job.
    """
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    if not (0.0 <= momentum < 1.0):
        raise ContractError(f"momentum must lie in [0, 1), got {momentum}")
    for p in params:
        g = p.tensor.grad
        if g is None:
            continue
        v = velocity.get(p.name)
        if v is None:
            v = np.zeros_like(p.data)
            velocity[p.name] = v
        if weight_decay != 0.0:
            g = g + weight_decay * p.data
        v *= momentum
        v += g
        p.data -= lr * v


def zero_grads(params: Sequence[Parameter]) -> None:
    for p in params:
        p.tensor.grad = None


def lr_at(epoch: int, base_lr: float, milestones: Iterable[int], decay: float) -> float:
    """Step schedule: base_lr scaled by decay once per milestone <= epoch."""
    passed = sum(1 for m in milestones if m <= epoch)
    return base_lr * (decay ** passed)

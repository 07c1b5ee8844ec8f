"""SGD with momentum and a milestone learning-rate schedule."""

from __future__ import annotations

import bisect

import numpy as np

from .tensor import ShapeError


def lr_schedule(step: int, base_lr: float, milestones) -> float:
    """``base_lr * 0.1 ** (number of milestones <= step)``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    return base_lr * 0.1 ** bisect.bisect_right(sorted(milestones), step)


def sgd_step(params, grads, velocities, lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """In-place update of parallel lists of arrays::

        v <- momentum * v + (grad + weight_decay * param)
        param <- param - lr * v
    """
    if not len(params) == len(grads) == len(velocities):
        raise ValueError("params, grads and velocities must have equal length")
    for i, (p, g, v) in enumerate(zip(params, grads, velocities)):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"parameter {i}: shape {p.shape} vs grad {g.shape} vs velocity {v.shape}")
        v *= momentum
        v += g + weight_decay * p
        p -= (lr * v).astype(p.dtype, copy=False)


class SGD:
    """Holds one zero-initialised velocity per parameter tensor.  Only
    parameters are updated; batch-norm running statistics are buffers and
    never reach the optimizer."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        sgd_step([p.data for p in self.params], grads, self.velocities, lr, self.momentum, self.weight_decay)

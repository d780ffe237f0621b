"""SGD with momentum and weight decay, plus cosine learning-rate annealing."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import AutodiffError, Tensor


class SGD:
    """v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.

    Velocity buffers are zero-initialized at construction.  ``step`` clears
    each parameter's gradient after applying it.
    """

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {weight_decay}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                raise AutodiffError(
                    f"sgd_step: parameter {p.name or p.shape} has no gradient")
            dt = p.data.dtype.type
            v *= dt(self.momentum)
            v += p.grad
            if self.weight_decay:
                v += dt(self.weight_decay) * p.data
            p.data -= dt(self.lr) * v
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_tensors(self, prefix: str) -> list[tuple[str, np.ndarray]]:
        return [(f"{prefix}.velocity.{i}", v) for i, v in enumerate(self.velocity)]


def sgd_step(param: Tensor, velocity: np.ndarray, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> None:
    """Single-parameter update with the same recurrence as ``SGD.step``."""
    opt = SGD([param], lr=lr, momentum=momentum, weight_decay=weight_decay)
    opt.velocity[0] = velocity
    opt.step()


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine annealing from lr0 at step 0 down to 0 at total_steps."""
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0

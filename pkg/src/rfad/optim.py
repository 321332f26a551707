"""Adam with decoupled weight decay and the milestone learning-rate rule."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError


class Adam:
    """Adam with decoupled weight decay.

    Weight decay shrinks the parameter before the moment update, so the
    moments see only the loss gradient. Parameters whose ``.grad`` is None
    are skipped entirely.
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-5,
                 weight_decay: float = 5e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise DimensionError(
                    f"gradient shape {g.shape} != parameter shape {p.data.shape}")
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(
                p.data.dtype, copy=False)


class StepSchedule:
    """Piecewise-constant rate: initial * factor^(milestones passed)."""

    def __init__(self, initial: float, factor: float = 0.1,
                 milestones: tuple[int, ...] = (70, 90)):
        self.initial = initial
        self.factor = factor
        self.milestones = tuple(sorted(milestones))

    def rate_at(self, epoch: int) -> float:
        if epoch < 0:
            raise ValueError("epoch must be non-negative")
        passed = sum(1 for m in self.milestones if epoch >= m)
        return self.initial * self.factor ** passed

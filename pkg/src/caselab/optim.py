from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor


class MissingGradientError(RuntimeError):
    pass


@dataclass(frozen=True)
class LinearSchedule:
    """Learning rate decayed linearly from ``start`` to ``end`` over ``steps`` calls."""

    start: float = 1e-3
    end: float = 1e-5
    steps: int = 1

    def __post_init__(self):
        if self.end > self.start:
            raise ValueError("schedule must be non-increasing")

    def __call__(self, i: int) -> float:
        if self.steps <= 1:
            return self.start
        frac = min(max(i, 0), self.steps - 1) / (self.steps - 1)
        return self.start + (self.end - self.start) * frac


class Adam:
    """Adam with bias correction. ``step`` consumes and clears gradients."""

    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float):
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise MissingGradientError(f"no gradient for parameter {p.name or i!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            p.data = (p.data - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None

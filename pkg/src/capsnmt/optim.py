"""Adam with the inverse-square-root warmup schedule."""

from __future__ import annotations

import numpy as np


class WarmupSchedule:
    """lr(step) = scale * dim^-0.5 * min(step^-0.5, step * warmup^-1.5)."""

    def __init__(self, dim: int, warmup_steps: int = 400, scale: float = 1.0):
        if warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        self.dim = dim
        self.warmup_steps = warmup_steps
        self.scale = scale

    def __call__(self, step: int) -> float:
        step = max(step, 1)
        return (
            self.scale
            * self.dim**-0.5
            * min(step**-0.5, step * self.warmup_steps**-1.5)
        )


class Adam:
    """Adam over a ParameterStore; reads ``p.grad``, updates ``p.value`` in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = params
        self.lr = lr  # float or callable step -> float
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {p.name: np.zeros_like(p.value.data) for p in params}
        self._v = {p.name: np.zeros_like(p.value.data) for p in params}

    def current_lr(self) -> float:
        return self.lr(self.step_count) if callable(self.lr) else self.lr

    def step(self) -> float:
        self.step_count += 1
        lr = self.current_lr()
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.step_count
        bias2 = 1.0 - b2**self.step_count
        for p in self.params:
            g = p.grad
            m = self._m[p.name]
            v = self._v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.value.data -= (lr * update).astype(p.value.data.dtype)
        return lr

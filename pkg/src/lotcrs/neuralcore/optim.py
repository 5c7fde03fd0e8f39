from __future__ import annotations

import numpy as np

from .model import ModelParams


class Adam:
    """Adam over every tensor of a :class:`ModelParams`, updating in place."""

    def __init__(self, params: ModelParams, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = params.zero_grads()
        self.v = params.zero_grads()
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for {name}")
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            self.params.tensors[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        if not self.params.all_finite():
            raise FloatingPointError("parameters became non-finite")

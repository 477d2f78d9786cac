"""Adam with global-norm gradient clipping."""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter


class Adam:
    def __init__(
        self,
        params: list[tuple[str, Parameter]],
        learning_rate: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        clip_norm: float = 0.1,
    ):
        self.params = params
        self.lr = learning_rate
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {name: np.zeros_like(p.values, dtype=np.float64) for name, p in params}
        self.v = {name: np.zeros_like(p.values, dtype=np.float64) for name, p in params}

    def clip_gradients(self) -> float:
        """Scale all gradients so their global L2 norm is at most
        ``clip_norm``; returns the pre-clip norm."""
        total = 0.0
        for _, p in self.params:
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        norm = float(np.sqrt(total))
        if self.clip_norm > 0 and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
            for _, p in self.params:
                if p.grad is not None:
                    p.grad *= scale
        return norm

    def step(self) -> float:
        norm = self.clip_gradients()
        self.t += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            if self.weight_decay > 0:
                g = g + self.weight_decay * p.values
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.values -= (self.lr * update).astype(p.values.dtype)
        return norm

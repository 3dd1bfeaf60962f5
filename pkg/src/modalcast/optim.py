"""Adam optimizer with bias correction.

Defaults: lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8. Only the learning
rate is load-bearing for the training protocol; the rest are the usual
conventions and stay configurable.
"""
from __future__ import annotations

import numpy as np

from .errors import UsageError
from .tensor import Tensor


class Adam:
    """Per-parameter first/second-moment state plus a shared step counter."""

    def __init__(self, params, lr: float = 5e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        """In-place bias-corrected update; clears grads afterwards."""
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise UsageError(f"adam step: parameter {i} has no gradient")
            if p.grad.shape != p.data.shape:
                raise UsageError(
                    f"adam step: grad shape {p.grad.shape} != param shape {p.data.shape}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def zero_fill_missing_grads(params) -> int:
    """Give zero gradients to params that received none this step.

    Ablation flags legitimately disconnect parameter groups from the
    loss; the optimizer itself treats a missing grad as a usage error,
    so the trainer materializes explicit zeros first. Returns how many
    were filled.
    """
    filled = 0
    for p in params:
        if isinstance(p, Tensor) and p.grad is None:
            p.grad = np.zeros_like(p.data)
            filled += 1
    return filled

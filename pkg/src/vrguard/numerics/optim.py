"""Adam with bias correction, operating on named leaf tensors in place."""

from __future__ import annotations

import numpy as np

from ..errors import ContractViolation
from .tensor import Tensor


class Adam:
    """Standard Adam; moments stored per parameter, step counter shared.

    update: m <- b1*m + (1-b1)*g ; v <- b2*v + (1-b2)*g^2
            p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
    """

    def __init__(self, params: dict, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: dict) -> None:
        """Apply one update from a {leaf Tensor -> grad Tensor} map (as returned by backward)."""
        by_id = {id(p): name for name, p in self.params.items()}
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for leaf, grad in grads.items():
            name = by_id.get(id(leaf))
            if name is None:
                continue  # gradient for something this optimizer does not own (e.g. the input)
            g = grad.data if isinstance(grad, Tensor) else np.asarray(grad)
            p = self.params[name]
            if g.shape != p.data.shape:
                raise ContractViolation(
                    f"adam: gradient shape {g.shape} != parameter '{name}' shape {p.data.shape}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

"""Adaptive per-parameter optimizer (Adam) over the network's parameter list."""

from __future__ import annotations

import numpy as np

from . import kernels


class Adam:
    """Adam with bias correction; state arrays parallel the given parameters."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        # params: list of (name, value, grad) with stable identity across steps
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(value) for _, value, _ in self.params]
        self.v = [np.zeros_like(value) for _, value, _ in self.params]

    def step(self) -> None:
        self.t += 1
        for (_, value, grad), m, v in zip(self.params, self.m, self.v):
            kernels.adam_step(value, grad, m, v, self.t,
                              self.lr, self.beta1, self.beta2, self.eps)

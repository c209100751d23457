#!/usr/bin/env python3
"""
Optimizer module for the belief-graph laboratory.
Handles gradient-norm clipping and the rectified and plain Adam step rules.
"""

import math
from typing import Dict, List, Sequence

import numpy as np

from beliefgraph.nn.layers import Parameter


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm

    Args:
        params: Parameters whose gradients are clipped
        max_norm: Norm ceiling (0 or less disables clipping)

    Returns:
        Global norm before clipping
    """
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def radam_step(params: Sequence[Parameter], lr: float, state: Dict,
               betas=(0.9, 0.999), eps: float = 1e-8, clip: float = 5.0) -> None:
    """One rectified-Adam update

    Args:
        params: Parameters with populated gradients
        lr: Learning rate
        state: Optimizer state, updated in place across calls
        betas: Moment decay rates
        eps: Denominator floor
        clip: Global gradient-norm ceiling applied first
    """
    params = [p for p in params if p.trainable]
    clip_grad_norm(params, clip)
    beta1, beta2 = betas
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    beta2_t = beta2 ** t
    rho_t = rho_inf - 2.0 * t * beta2_t / (1.0 - beta2_t)
    moments = state.setdefault("moments", {})
    for p in params:
        grad = p.gradient
        m, v = moments.get(id(p), (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        moments[id(p)] = (m, v)
        m_hat = m / (1.0 - beta1 ** t)
        if rho_t > 4.0:
            v_hat = np.sqrt(v / (1.0 - beta2_t))
            rect = math.sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf
                             / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
            step = rect * m_hat / (v_hat + eps)
        else:
            step = m_hat
        p.data = (p.data - lr * step).astype(p.data.dtype)


def adam_step(params: Sequence[Parameter], lr: float, state: Dict,
              betas=(0.9, 0.999), eps: float = 1e-8, clip: float = 0.0) -> None:
    params = [p for p in params if p.trainable]
    clip_grad_norm(params, clip)
    beta1, beta2 = betas
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    moments = state.setdefault("moments", {})
    for p in params:
        grad = p.gradient
        m, v = moments.get(id(p), (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        moments[id(p)] = (m, v)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


class RAdam:
    """Class for rectified-Adam optimization of a fixed parameter list"""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, clip: float = 5.0):
        self.params: List[Parameter] = list(params)
        self.lr = lr
        self.clip = clip
        self.state: Dict = {}

    def step(self) -> None:
        radam_step(self.params, self.lr, self.state, clip=self.clip)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam(RAdam):
    """Class for plain Adam optimization"""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, clip: float = 0.0):
        super().__init__(params, lr=lr, clip=clip)

    def step(self) -> None:
        adam_step(self.params, self.lr, self.state, clip=self.clip)

#!/usr/bin/env python3
"""
Gradient verification harness: reverse-mode gradients against central
finite differences.
"""

from typing import Callable, Optional, Sequence, Union

import numpy as np

from beliefgraph.errors import DomainError
from beliefgraph.nn.tensor import Tensor, default_dtype


def grad_check(f: Callable[[], Tensor], inputs: Union[Tensor, Sequence[Tensor]], eps: float = 1e-5,
               max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Largest relative error between analytic and numeric gradients

    Args:
        f: Closure computing a scalar Tensor from the inputs
        inputs: Tensors (requiring gradients) to perturb
        eps: Finite-difference step
        max_coords: Check at most this many randomly chosen coordinates per input
        seed: Seed of the coordinate sampler

    Returns:
        max |analytic - numeric| / max(|analytic|, |numeric|, 1e-3)
    """
    if default_dtype() != np.float64:
        raise DomainError("grad_check needs float64 precision")
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for x in inputs:
        if x.data.dtype != np.float64:
            raise DomainError("grad_check inputs must be float64 tensors")
        x.grad = None

    out = f()
    if out.data.size != 1:
        raise DomainError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = [x.grad if x.grad is not None else np.zeros_like(x.data) for x in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for x, grad in zip(inputs, analytic):
        flat = x.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            original = flat[i]
            flat[i] = original + eps
            plus = float(f().data)
            flat[i] = original - eps
            minus = float(f().data)
            flat[i] = original
            numeric = (plus - minus) / (2.0 * eps)
            a = float(grad.reshape(-1)[i])
            error = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            worst = max(worst, error)
    return worst

"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def gradient_check(f, leaves: list[Tensor], eps: float = 1e-6) -> float:
    """Max over leaf entries of |analytic - numeric| / max(1, |analytic|, |numeric|).

    ``f`` is a zero-argument callable that rebuilds the graph from the
    current values of ``leaves`` and returns a scalar Tensor.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    for leaf in leaves:
        if leaf.dtype != np.float64:
            raise ValueError("gradient_check needs float64 leaves")
        leaf.requires_grad = True
        leaf.grad = None
    root = f()
    if root.data.size != 1:
        raise ValueError(f"gradient_check needs a scalar root, got shape {root.shape}")
    root.backward()
    worst = 0.0
    for leaf in leaves:
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy()
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().data)
            flat[i] = orig - eps
            down = float(f().data)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst

"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from dgfnet.autodiff.tensor import Tensor, backward
from dgfnet.errors import ContractError


def finite_diff_check(loss_fn: Callable[[], Tensor], parameter: Tensor,
                      epsilon: float = 1e-5, max_coords: int = 8,
                      rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` rebuilds the scalar loss from current parameter values each
    call. Returns the max over sampled coordinates of
    |analytic - central| / (|analytic| + |central| + 1e-12).
    """
    if not (0.0 < epsilon <= 1e-2):
        raise ContractError(f"epsilon must be in (0, 1e-2], got {epsilon}")
    if not parameter.requires_grad:
        raise ContractError("finite_diff_check: parameter has requires_grad=False")

    parameter.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = parameter.grad
    if analytic is None:
        analytic = np.zeros_like(parameter.data)

    n = parameter.data.size
    if rng is None:
        rng = np.random.default_rng(0)
    coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords,
                                                             replace=False)
    flat = parameter.data.reshape(-1)
    worst = 0.0
    for c in coords:
        orig = flat[c]
        flat[c] = orig + epsilon
        hi = loss_fn().item()
        flat[c] = orig - epsilon
        lo = loss_fn().item()
        flat[c] = orig
        central = (hi - lo) / (2.0 * epsilon)
        a = float(analytic.reshape(-1)[c])
        err = abs(a - central) / (abs(a) + abs(central) + 1e-12)
        worst = max(worst, err)
    return worst

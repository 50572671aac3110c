from __future__ import annotations

from typing import Callable

import numpy as np

from numerics.tensor import Tape, Tensor


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    base = np.array(x.data, dtype=np.float64)
    point = Tensor(base, requires_grad=True)
    with Tape() as tape:
        out = f(point)
    tape.backward(out)
    analytic = point.grad if point.grad is not None else np.zeros_like(base)

    worst = 0.0
    for idx in np.ndindex(base.shape):
        plus = base.copy()
        plus[idx] += h
        minus = base.copy()
        minus[idx] -= h
        numeric = (f(Tensor(plus)).item() - f(Tensor(minus)).item()) / (2.0 * h)
        err = abs(analytic[idx] - numeric) / max(1.0, abs(analytic[idx]))
        worst = max(worst, err)
    return worst

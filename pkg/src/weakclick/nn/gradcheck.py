"""Central finite-difference check of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .functional import record_kinks
from .tensor import Tensor, no_grad


@dataclass
class GradCheckResult:
    rel_error: float
    n_checked: int
    n_skipped: int
    max_abs_error: float

    def passed(self, tol: float = 1e-3) -> bool:
        return self.n_checked > 0 and self.rel_error <= tol


def _same(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradcheck(loss_fn: Callable[[], Tensor], params: list[Tensor], eps: float = 1e-3,
              max_coords: int | None = None, rng: np.random.Generator | None = None) -> GradCheckResult:
    """Compare backprop gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` must be deterministic (re-seed any dropout inside it).  The
    error is ``||num - ana|| / max(||num||, ||ana||)`` over every checked
    coordinate.  Coordinates whose +/-eps evaluations flip any ReLU sign are
    skipped because the difference quotient straddles a kink there.
    """
    for p in params:
        p.grad = None
    with record_kinks() as base:
        loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    nums, anas = [], []
    skipped = 0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad(), record_kinks() as plus:
                f_plus = float(loss_fn().data)
            flat[i] = orig - eps
            with no_grad(), record_kinks() as minus:
                f_minus = float(loss_fn().data)
            flat[i] = orig
            if not (_same(plus.patterns, base.patterns) and _same(minus.patterns, base.patterns)):
                skipped += 1
                continue
            nums.append((f_plus - f_minus) / (2.0 * eps))
            anas.append(float(ana.reshape(-1)[i]))
    num = np.asarray(nums)
    ana = np.asarray(anas)
    if num.size == 0:
        return GradCheckResult(float("inf"), 0, skipped, float("inf"))
    denom = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-12)
    return GradCheckResult(float(np.linalg.norm(num - ana) / denom), int(num.size), skipped,
                           float(np.abs(num - ana).max()))

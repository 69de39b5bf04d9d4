"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, get_dtype


@dataclass
class GradCheckResult:
    name: str
    checked: int
    max_rel_error: float
    failures: int
    rtol: float

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: {self.checked} components, "
                f"max rel err {self.max_rel_error:.2e} (tol {self.rtol:.0e}), {self.failures} failures")


def numerical_gradient(fn: Callable[[], Tensor], t: Tensor, index: int, step: float) -> float:
    flat = t.data.reshape(-1)
    orig = flat[index]
    flat[index] = orig + step
    f_plus = fn().item()
    flat[index] = orig - step
    f_minus = fn().item()
    flat[index] = orig
    return (f_plus - f_minus) / (2 * step)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], name: str = "fn",
                    step: float = 1e-5, rtol: float = 1e-4, floor: float = 1e-8,
                    max_components: int | None = None,
                    rng: np.random.Generator | None = None) -> GradCheckResult:
    """Compare tape gradients of the scalar ``fn()`` against central differences.

    Components where both the analytic and numerical values are at most
    ``floor`` in magnitude are skipped. ``max_components`` caps the number of
    entries probed per tensor (sampled with ``rng``).
    """
    if get_dtype() != np.float64:
        raise RuntimeError("gradient checks need 64-bit precision")
    with Tape() as tape:
        loss = fn()
    grads = backward(loss, tape)

    rng = rng or np.random.default_rng(0)
    checked = failures = 0
    worst = 0.0
    for t in inputs:
        analytic = grads.get(t)
        if analytic is None:
            analytic = np.zeros_like(t.data)
        analytic = analytic.reshape(-1)
        idx = np.arange(t.size)
        if max_components is not None and t.size > max_components:
            idx = np.sort(rng.choice(t.size, size=max_components, replace=False))
        for i in idx:
            num = numerical_gradient(fn, t, int(i), step)
            a = float(analytic[i])
            scale = max(abs(a), abs(num))
            if scale <= floor:
                continue
            rel = abs(a - num) / scale
            checked += 1
            worst = max(worst, rel)
            if rel > rtol:
                failures += 1
    return GradCheckResult(name, checked, worst, failures, rtol)

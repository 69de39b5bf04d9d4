from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .ops import DimensionError
from .tensor import Tensor


@dataclass
class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update.

    Parameters are updated by rebinding ``param.data`` to a fresh array, so
    arrays captured by an earlier tape are never mutated. Parameters missing
    from ``grads`` are treated as having zero gradient.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    t = state.step + 1
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)
        state.m[name] = m.astype(p.data.dtype, copy=False)
        state.v[name] = v.astype(p.data.dtype, copy=False)
    state.step = t
    return state

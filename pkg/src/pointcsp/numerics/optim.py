"""AdamW: Adam moments with weight decay decoupled from the gradient term."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        b1, b2 = self.betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1), got {self.betas}")
        if self.eps <= 0 or self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be >= 0 and eps > 0")
        if self.step < 0:
            raise ValueError("step counter must be >= 0")


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
               state: OptimizerState, lr: float | None = None):
    """One AdamW update. Returns ``(new_params, new_state)``; inputs are untouched.

    Parameters without an entry in ``grads`` are passed through unchanged.
    """
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params: dict[str, np.ndarray] = {}
    m_new, v_new = dict(state.m), dict(state.v)
    for name, p in params.items():
        if name not in grads:
            new_params[name] = p
            continue
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ValueError(f"moment shape {m.shape} != parameter shape {p.shape} for {name!r}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params[name] = p * (1.0 - lr * state.weight_decay) - lr * update
        m_new[name], v_new[name] = m, v
    new_state = OptimizerState(lr=state.lr, weight_decay=state.weight_decay, betas=state.betas,
                               eps=state.eps, step=t, m=m_new, v=v_new)
    return new_params, new_state

"""Central finite-difference checks against the tape gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, constants, value_and_grad


def numerical_gradient(fn: Callable[[dict[str, Tensor]], Tensor], params: Mapping[str, np.ndarray],
                       eps: float = 1e-5) -> dict[str, np.ndarray]:
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    out = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn(constants(base)).item()
            flat[i] = orig - eps
            down = fn(constants(base)).item()
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2.0 * eps)
        out[name] = g
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(fn, params: Mapping[str, np.ndarray], eps: float = 1e-5,
                    floor: float = 1e-6) -> dict[str, float]:
    """Per-parameter max relative error between tape and finite-difference gradients."""
    _, analytic = value_and_grad(fn, params)
    numeric = numerical_gradient(fn, params, eps)
    return {k: relative_error(analytic[k], numeric[k], floor) for k in params}

"""Central finite-difference check of reverse-mode gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from graphbid.errors import ConfigurationError, EvaluationError
from graphbid.numkit.tensor import Tensor, no_grad


def _value(f: Callable[[Tensor], Tensor], x: np.ndarray) -> float:
    with no_grad():
        out = float(np.asarray(f(Tensor(x, dtype=np.float64)).data))
    if not np.isfinite(out):
        raise EvaluationError("function is not finite at the probe point")
    return out


def numeric_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = _value(f, x)
        flat[i] = orig - eps
        lo = _value(f, x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6,
               floor: float = 1e-6) -> float:
    """Max coordinate-wise relative error between autodiff and finite differences.

    ``f`` maps a tensor to a scalar tensor. Coordinates whose analytic and
    numeric gradients are both below ``floor`` in magnitude count as exact.
    Run inside ``precision(np.float64)`` for meaningful results.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ConfigurationError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = Tensor(x.copy(), requires_grad=True, dtype=np.float64)
    out = f(probe)
    if out.size != 1:
        raise ConfigurationError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise EvaluationError("function is not finite at the probe point")
    if out.requires_grad:
        out.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(x)
    numeric = numeric_gradient(f, x, eps)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    rel = np.abs(analytic - numeric) / denom
    return float(rel.max()) if rel.size else 0.0

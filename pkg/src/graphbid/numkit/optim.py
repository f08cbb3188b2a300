"""Adam with bias correction, as a pure step function plus a small wrapper."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from graphbid.errors import DimensionError
from graphbid.numkit.tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray | None],
              state: AdamState) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new parameter arrays; state is advanced."""
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise DimensionError("optimizer state does not match parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            updated.append(p)
            continue
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        updated.append((p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype))
    return updated, state


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                              for p in params if p.grad is not None)))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, max_grad_norm: float | None = None):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
        self.max_grad_norm = max_grad_norm

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        if self.max_grad_norm:
            clip_grad_norm(self.params, self.max_grad_norm)
        new, self.state = adam_step([p.data for p in self.params],
                                    [p.grad for p in self.params], self.state)
        for p, value in zip(self.params, new):
            p.data = value

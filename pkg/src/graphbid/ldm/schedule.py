"""Cosine noise schedule and the closed-form forward process."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from graphbid.errors import ConfigurationError, InputError

MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Index 0 is clean data; 1..n_steps are increasingly noisy.

    ``alpha_bar[n]`` is the cumulative product of (1 - beta) up to step n, so
    alpha_bar[0] == 1 exactly.
    """
    n_steps: int
    betas: np.ndarray          # [N + 1], betas[0] = 0
    alpha_bar: np.ndarray      # [N + 1]

    @classmethod
    def cosine(cls, n_steps: int = 100, offset: float = 0.008) -> "NoiseSchedule":
        if n_steps < 1:
            raise ConfigurationError("need at least one diffusion step")
        s = np.arange(n_steps + 1, dtype=np.float64) / n_steps
        f = np.cos((s + offset) / (1 + offset) * math.pi / 2) ** 2
        raw = f / f[0]
        betas = np.zeros(n_steps + 1)
        betas[1:] = np.clip(1.0 - raw[1:] / raw[:-1], 1e-8, MAX_BETA)
        return cls(n_steps, betas, np.cumprod(1.0 - betas))

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    def posterior_variance(self) -> np.ndarray:
        """Reverse-step variances; step 1 uses beta_1 so every entry is positive."""
        ab = self.alpha_bar
        var = np.empty(self.n_steps + 1)
        var[0] = 0.0
        var[1] = self.betas[1]
        var[2:] = (1.0 - ab[1:-1]) / (1.0 - ab[2:]) * self.betas[2:]
        return var

    def check(self, n) -> np.ndarray:
        n = np.asarray(n)
        if np.any(n < 0) or np.any(n > self.n_steps):
            raise InputError(f"diffusion step must lie in [0, {self.n_steps}]")
        return n.astype(np.int64)


def q_sample(z0: np.ndarray, n, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """z_n = sqrt(abar_n) z0 + sqrt(1 - abar_n) noise; ``n`` scalar or one per batch row."""
    n = schedule.check(n)
    z0 = np.asarray(z0)
    if np.shape(noise) != z0.shape:
        raise InputError("noise must match z0 in shape")
    ab = schedule.alpha_bar[n].reshape(np.shape(n) + (1,) * (z0.ndim - np.ndim(n)))
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * noise).astype(z0.dtype)

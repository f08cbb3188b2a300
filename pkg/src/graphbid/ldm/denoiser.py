"""1D temporal convolution denoiser with step and condition modulation."""
from __future__ import annotations

import math

import numpy as np

from graphbid.errors import ConfigurationError
from graphbid.numkit import ops
from graphbid.numkit.layers import MLP, Conv1d, Linear, Module
from graphbid.numkit.tensor import Tensor, as_tensor


def sinusoidal_embedding(n, dim: int) -> np.ndarray:
    """[B] integer steps -> [B, dim] sin/cos features."""
    n = np.asarray(n, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = n[:, None] * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class ResBlock(Module):
    def __init__(self, channels: int, kernel: int, emb_dim: int, rng: np.random.Generator):
        self.conv1 = Conv1d(channels, channels, kernel, rng)
        self.conv2 = Conv1d(channels, channels, kernel, rng)
        self.film = Linear(emb_dim, 2 * channels, rng, zero_init=True)

    def forward(self, h: Tensor, emb: Tensor) -> Tensor:
        c = h.shape[1]
        mod = self.film(emb)                                     # [B, 2C]
        scale = ops.reshape(mod[:, :c], (-1, c, 1))
        shift = ops.reshape(mod[:, c:], (-1, c, 1))
        y = self.conv1(ops.silu(h))
        y = y * (scale + 1.0) + shift
        return h + self.conv2(ops.silu(y))


class Denoiser(Module):
    """Predicts the noise of a [B, T, d] latent window at step n under condition c."""

    def __init__(self, rng: np.random.Generator, dim: int, cond_dim: int, channels: int = 64,
                 blocks: int = 4, kernel: int = 5, emb_dim: int = 64):
        if kernel % 2 == 0:
            raise ConfigurationError("denoiser kernel must be odd")
        self.dim, self.cond_dim, self.emb_dim = dim, cond_dim, emb_dim
        self.step_mlp = MLP([emb_dim, emb_dim, emb_dim], rng, activation="silu")
        self.cond_mlp = MLP([cond_dim, emb_dim, emb_dim], rng, activation="silu")
        self.inp = Conv1d(dim, channels, 1, rng)
        self.blocks = [ResBlock(channels, kernel, emb_dim, rng) for _ in range(blocks)]
        self.out = Conv1d(channels, dim, 1, rng)

    @property
    def dtype(self):
        return self.inp.weight.data.dtype

    def forward(self, z, n, cond) -> Tensor:
        z = as_tensor(z)
        if z.ndim != 3 or z.shape[2] != self.dim:
            raise ConfigurationError(f"denoiser expects [B, T, {self.dim}], got {z.shape}")
        cond = as_tensor(cond)
        if cond.shape != (z.shape[0], self.cond_dim):
            raise ConfigurationError(f"condition must be [{z.shape[0]}, {self.cond_dim}]")
        emb = self.step_mlp(Tensor(sinusoidal_embedding(n, self.emb_dim))) + self.cond_mlp(cond)
        emb = ops.silu(emb)
        h = self.inp(ops.transpose(z, (0, 2, 1)))
        for block in self.blocks:
            h = block(h, emb)
        return ops.transpose(self.out(ops.silu(h)), (0, 2, 1))

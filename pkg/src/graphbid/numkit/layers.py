"""Parameterised layers built on the tensor primitives."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from graphbid.errors import ConfigurationError, DimensionError
from graphbid.numkit import tensor as T
from graphbid.numkit.tensor import Tensor, get_default_dtype


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-limit, limit, size=shape).astype(get_default_dtype())
    return Tensor(data, requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=get_default_dtype()), requires_grad=True)


class Module:
    """Container that discovers parameters from its attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {value.shape} != {p.shape}")
            p.data = value.astype(p.data.dtype).copy()

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        self.in_dim, self.out_dim = in_dim, out_dim
        if zero_init:
            self.weight = zeros_param((in_dim, out_dim))
        else:
            self.weight = glorot_uniform(rng, (in_dim, out_dim), in_dim, out_dim)
        self.bias = zeros_param((out_dim,)) if bias else None

    def forward(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"Linear expects last dim {self.in_dim}, got {x.shape}")
        if x.ndim == 1:
            out = T.matmul(T.reshape(x, (1, -1)), self.weight)
            out = T.reshape(out, (self.out_dim,))
        else:
            out = T.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, zero_init: bool = False):
        if kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel_size must be odd, got {kernel_size}")
        shape = (out_channels, in_channels, kernel_size)
        if zero_init:
            self.weight = zeros_param(shape)
        else:
            self.weight = glorot_uniform(rng, shape, in_channels * kernel_size,
                                         out_channels * kernel_size)
        self.bias = zeros_param((out_channels,))

    def forward(self, x) -> Tensor:
        return T.conv1d(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = ones_param((dim,))
        self.beta = zeros_param((dim,))
        self.eps = eps

    def forward(self, x) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


_ACTIVATIONS = {"gelu": T.gelu, "silu": T.silu, "relu": T.relu, "tanh": T.tanh}


class MLP(Module):
    def __init__(self, sizes: list[int], rng: np.random.Generator, activation: str = "gelu",
                 zero_last: bool = False):
        if len(sizes) < 2:
            raise ConfigurationError("MLP needs at least input and output sizes")
        self.layers = [
            Linear(a, b, rng, zero_init=zero_last and i == len(sizes) - 2)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        self.activation = activation

    def forward(self, x) -> Tensor:
        act = _ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention over the second-to-last axis."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ConfigurationError(f"model dim {dim} is not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        # [..., S, d] -> [..., H, S, d/H]
        *lead, s, _ = x.shape
        x = T.reshape(x, tuple(lead) + (s, self.heads, self.dim // self.heads))
        axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
        return T.transpose(x, tuple(axes))

    def forward(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-1] != self.dim:
            raise DimensionError(f"attention expects dim {self.dim}, got {x.shape}")
        *lead, s, _ = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(self.dim // self.heads))
        weights = T.softmax(scores, axis=-1)
        self.last_weights = weights.data
        ctx = T.matmul(weights, v)
        nl = len(lead)
        ctx = T.transpose(ctx, tuple(range(nl)) + (nl + 1, nl, nl + 2))
        ctx = T.reshape(ctx, tuple(lead) + (s, self.dim))
        return self.out(ctx)


class GraphAttention(Module):
    """Attention message passing where scores see both endpoints.

    score(e = j -> i) = a . leaky_relu(W_dst h_i + W_src h_j + W_edge f_e),
    normalised over the incoming edges of i. Callers add self-loops.
    """

    def __init__(self, in_dim: int, out_dim: int, edge_dim: int, rng: np.random.Generator,
                 negative_slope: float = 0.2):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.src = Linear(in_dim, out_dim, rng, bias=False)
        self.dst = Linear(in_dim, out_dim, rng, bias=False)
        self.edge = Linear(edge_dim, out_dim, rng, bias=False)
        self.att = glorot_uniform(rng, (out_dim, 1), out_dim, 1)
        self.bias = zeros_param((out_dim,))
        self.negative_slope = negative_slope
        self.last_alpha: np.ndarray | None = None

    def forward(self, h, src: np.ndarray, dst: np.ndarray, edge_feat, n_nodes: int) -> Tensor:
        h = T.as_tensor(h)
        if h.shape[-1] != self.in_dim:
            raise DimensionError(f"graph layer expects dim {self.in_dim}, got {h.shape}")
        hs = self.src(h)
        hd = self.dst(h)
        msg = T.getitem(hs, src)
        pre = msg + T.getitem(hd, dst) + self.edge(edge_feat)
        scores = T.reshape(T.matmul(T.leaky_relu(pre, self.negative_slope), self.att), (-1,))
        alpha = T.segment_softmax(scores, dst, n_nodes)
        self.last_alpha = alpha.data
        agg = T.segment_sum(msg * T.reshape(alpha, (-1, 1)), dst, n_nodes)
        return T.gelu(agg + self.bias)

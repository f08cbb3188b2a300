"""Minimal numpy tensor kernel: autodiff primitives, layers, Adam, checkpoints."""
from graphbid.numkit import tensor as ops
from graphbid.numkit.checkpoint import load_checkpoint, save_checkpoint
from graphbid.numkit.gradcheck import grad_check
from graphbid.numkit.layers import (
    MLP,
    Conv1d,
    GraphAttention,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
)
from graphbid.numkit.optim import Adam, AdamState, adam_step
from graphbid.numkit.tensor import (
    Tensor,
    conv1d,
    matmul,
    no_grad,
    precision,
    softmax,
)


def multi_head_attention(x, params: MultiHeadAttention, heads: int | None = None):
    """Functional form: apply ``params`` to ``x`` ([S, d] or [B, S, d])."""
    if heads is not None and heads != params.heads:
        from graphbid.errors import ConfigurationError
        raise ConfigurationError(f"layer has {params.heads} heads, asked for {heads}")
    return params(x)


__all__ = [
    "Adam", "AdamState", "Conv1d", "GraphAttention", "LayerNorm", "Linear", "MLP", "Module",
    "MultiHeadAttention", "Tensor", "adam_step", "conv1d", "grad_check", "load_checkpoint",
    "matmul", "multi_head_attention", "no_grad", "ops", "precision", "save_checkpoint",
    "softmax",
]

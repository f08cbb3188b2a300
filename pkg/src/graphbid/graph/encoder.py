"""Attention GNN encoder, equilibrium aggregation and the self-predictive loss."""
from __future__ import annotations

import numpy as np

from graphbid.errors import ConfigurationError, InputError
from graphbid.graph.build import (
    EDGE_FEATURES,
    IO_FEATURES,
    SELF_LOOP_FEATURE,
    AuctionGraph,
    GraphBatch,
    batch_graphs,
    hub_feature_dim,
)
from graphbid.numkit import ops
from graphbid.numkit.layers import MLP, GraphAttention, LayerNorm, Linear, Module, \
    MultiHeadAttention
from graphbid.numkit.tensor import Tensor, no_grad


class GnnEncoder(Module):
    """L rounds of attention message passing; agent readout x_i = h(VE_i) + h(VN_i)."""

    def __init__(self, rng: np.random.Generator, dim: int = 64, layers: int = 2,
                 n_categories: int = 4):
        self.dim = dim
        self.n_categories = n_categories
        self.hub_in = Linear(hub_feature_dim(n_categories), dim, rng)
        self.io_in = Linear(IO_FEATURES, dim, rng)
        self.layers = [GraphAttention(dim, dim, EDGE_FEATURES, rng) for _ in range(layers)]

    def forward(self, batch: GraphBatch) -> tuple[Tensor, Tensor]:
        """Returns agent embeddings [G, A, d] and all node states [N, d]."""
        if batch.hub_feat.shape[1] != self.hub_in.in_dim or \
                batch.io_feat.shape[1] != self.io_in.in_dim:
            raise ConfigurationError("graph feature dimensions do not match the encoder")
        h = self.hub_in(Tensor(batch.hub_feat))
        if batch.io_feat.shape[0]:
            h = ops.concat([h, self.io_in(Tensor(batch.io_feat))], axis=0)
        loops = np.arange(batch.n_nodes, dtype=np.int64)
        src = np.concatenate([batch.src, loops])
        dst = np.concatenate([batch.dst, loops])
        ef = Tensor(np.concatenate([batch.edge_feat.reshape(-1, EDGE_FEATURES),
                                    np.tile(SELF_LOOP_FEATURE, (batch.n_nodes, 1))]))
        for layer in self.layers:
            h = layer(h, src, dst, ef, batch.n_nodes)
        x = ops.getitem(h, batch.agent_hubs[..., 0]) + ops.getitem(h, batch.agent_hubs[..., 1])
        return x, h


def encode(graph: AuctionGraph | list[AuctionGraph], params: GnnEncoder) -> dict[int, np.ndarray]:
    """Agent id -> embedding for a single graph (no gradient)."""
    with no_grad():
        x, _ = params(batch_graphs([graph] if isinstance(graph, AuctionGraph) else graph))
    return {i: x.data[0, i] for i in range(x.shape[1])}


class EcAggregator(Module):
    """One post-norm Transformer encoder block over agents, then mean pooling."""

    def __init__(self, rng: np.random.Generator, dim: int = 64, heads: int = 4,
                 ffn_mult: int = 2):
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.ffn = MLP([dim, ffn_mult * dim, dim], rng)
        self.norm2 = LayerNorm(dim)

    def block(self, x) -> Tensor:
        y = self.norm1(x + self.attn(x))
        return self.norm2(y + self.ffn(y))

    def forward(self, x) -> Tensor:
        """[..., A, d] agent tokens -> [..., d] joint embedding."""
        x = ops.as_tensor(x)
        if x.ndim < 2 or x.shape[-2] == 0:
            raise InputError("equilibrium aggregation needs at least one agent")
        return ops.mean(self.block(x), axis=-2)


def ec_aggregate(embeddings, params: EcAggregator) -> np.ndarray:
    embeddings = list(embeddings)
    if not embeddings:
        raise InputError("equilibrium aggregation needs at least one agent")
    with no_grad():
        return params(Tensor(np.stack([np.asarray(e) for e in embeddings]))).data


def others_mean(x: Tensor) -> Tensor:
    """For [..., A, d] embeddings, the mean of the other agents' rows per agent."""
    n = x.shape[-2]
    if n == 1:
        return x * 0.0
    total = ops.tsum(x, axis=-2, keepdims=True)
    return (total - x) * (1.0 / (n - 1))


class SelfPredictor(Module):
    """Predicts the target encoding of x_{t+1} from x_t and a summary of the others."""

    def __init__(self, rng: np.random.Generator, dim: int = 64):
        self.net = MLP([2 * dim, dim, dim], rng)
        self.degenerate_count = 0

    def forward(self, x_t, others) -> Tensor:
        return self.net(ops.concat([x_t, others], axis=-1))


def cosine_rows(a: Tensor, b: np.ndarray, eps: float = 1e-12) -> tuple[Tensor, np.ndarray]:
    """Row-wise cosine of a (differentiable) against b (constant); mask of usable rows."""
    b = np.asarray(b, dtype=a.data.dtype)
    na = np.linalg.norm(a.data, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    ok = (na > eps) & (nb > eps)
    safe_nb = np.where(ok, nb, 1.0)
    a_norm = ops.sqrt(ops.tsum(a * a, axis=-1) + eps * eps)
    cos = ops.tsum(a * Tensor(b / safe_nb[..., None]), axis=-1) / a_norm
    return cos, ok


def spl_loss(x_t, others_summary, x_next_target, predictor: SelfPredictor) -> Tensor:
    """Negative cosine between predictor(x_t, others) and the frozen target of t+1.

    Rows where either vector has zero norm contribute 0 and bump the predictor's
    ``degenerate_count``.
    """
    pred = predictor(x_t, others_summary)
    target = x_next_target.data if isinstance(x_next_target, Tensor) else x_next_target
    cos, ok = cosine_rows(pred, target)
    bad = int((~ok).sum())
    if bad:
        predictor.degenerate_count += bad
    mask = Tensor(ok.astype(cos.data.dtype))
    return -ops.tsum(cos * mask) * (1.0 / max(1, ok.size))


class EmaTarget:
    """Exponential moving average copy of an encoder, used for SPL targets."""

    def __init__(self, online: GnnEncoder, decay: float = 0.99, seed: int = 0):
        self.decay = decay
        self.model = GnnEncoder(np.random.default_rng(seed), online.dim, len(online.layers),
                                online.n_categories)
        self.model.load_state_dict(online.state_dict())

    def update(self, online: GnnEncoder) -> None:
        online_params = dict(online.named_parameters())
        for name, p in self.model.named_parameters():
            p.data = (self.decay * p.data + (1.0 - self.decay) * online_params[name].data
                      ).astype(p.data.dtype)

    def __call__(self, batch: GraphBatch) -> np.ndarray:
        with no_grad():
            x, _ = self.model(batch)
        return x.data

"""Inverse dynamics: recover per-IO bids from consecutive agent embeddings.

A training tuple is (x_t, x_{t+1}, f_k, c, b) for one agent and one exposed
IO: x are agent (or joint) embeddings, f_k is the IO's node embedding with the
agent's own value appended, c is the per-agent context and b the observed bid.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from graphbid.auction.env import states_from_record
from graphbid.auction.types import EpisodeRecord
from graphbid.errors import ConfigurationError, InputError
from graphbid.graph.build import AuctionGraph, batch_graphs, build_graph, context_dim, \
    context_vector
from graphbid.graph.encoder import EcAggregator, EmaTarget, GnnEncoder, SelfPredictor, \
    others_mean, spl_loss
from graphbid.ldm.data import EpisodeLatents, condition_vector
from graphbid.numkit import ops
from graphbid.numkit.layers import MLP, Module
from graphbid.numkit.optim import Adam
from graphbid.numkit.tensor import Tensor, as_tensor, no_grad

log = logging.getLogger(__name__)

VALUE_FEATURES = 2  # log1p(v), v


def value_features(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return np.stack([np.log1p(values), values], axis=-1)


class IdmModel(Module):
    """MLP over [x_t, x_next, f_k, c] with a softplus head."""

    def __init__(self, rng: np.random.Generator, dim: int = 64, n_categories: int = 4,
                 hidden: int = 128, zero_last: bool = False):
        self.dim = dim
        self.f_dim = dim + VALUE_FEATURES
        self.c_dim = context_dim(n_categories)
        self.net = MLP([2 * dim + self.f_dim + self.c_dim, hidden, hidden, 1], rng,
                       zero_last=zero_last)

    def forward(self, x_t, x_next, f, c) -> Tensor:
        parts = [as_tensor(p) for p in (x_t, x_next, f, c)]
        want = (self.dim, self.dim, self.f_dim, self.c_dim)
        for p, w in zip(parts, want):
            if p.shape[-1] != w:
                raise ConfigurationError(f"IDM input has width {p.shape[-1]}, expected {w}")
        out = self.net(ops.concat(parts, axis=-1))
        return ops.softplus(ops.reshape(out, out.shape[:-1]))


def idm_predict(x_t, x_next, f_k, c, params: IdmModel) -> np.ndarray | float:
    """Nonnegative bid(s) for one tuple or a stacked batch of tuples."""
    arrays = [np.asarray(a, dtype=float) for a in (x_t, x_next, f_k, c)]
    if not all(np.isfinite(a).all() for a in arrays):
        raise InputError("IDM inputs must be finite")
    with no_grad():
        out = params(*arrays).data
    return float(out) if out.ndim == 0 else out


@dataclass
class IdmBatch:
    x_t: Tensor | np.ndarray
    x_next: Tensor | np.ndarray
    f: Tensor | np.ndarray
    c: Tensor | np.ndarray
    target: np.ndarray

    def __len__(self) -> int:
        return int(np.asarray(self.target).shape[0])


def graph_loss(batch: IdmBatch, params: IdmModel) -> Tensor:
    """Unit-variance Gaussian negative log-likelihood up to a constant: the MSE."""
    if len(batch) == 0:
        raise InputError("graph_loss needs a nonempty batch")
    target = np.asarray(batch.target)
    if (target < 0).any():
        raise InputError("bid targets must be nonnegative")
    pred = params(batch.x_t, batch.x_next, batch.f, batch.c)
    return ops.mse(pred, Tensor(target.astype(pred.data.dtype)))


def bid_l2(pred: np.ndarray, true: np.ndarray) -> float:
    return float(np.sqrt(np.sum((np.asarray(pred) - np.asarray(true)) ** 2)))


def bid_accuracy(pairs) -> dict[int, float]:
    """Mean per-step l2 distance of bid vectors, per agent.

    ``pairs`` yields (agent, predicted vector, true vector) for every agent-step
    with at least one exposed IO.
    """
    totals: dict[int, list[float]] = {}
    for agent, pred, true in pairs:
        totals.setdefault(int(agent), []).append(bid_l2(pred, true))
    return {a: float(np.mean(v)) for a, v in sorted(totals.items())}


# ---------------------------------------------------------------------------
# transitions drawn from stored episodes


@dataclass
class Transition:
    """One step of one episode: graphs before and after, plus every bid tuple."""
    graph_t: AuctionGraph
    graph_next: AuctionGraph
    context: np.ndarray          # [A, c_dim]
    agent: np.ndarray            # [n_tuples]
    io_row: np.ndarray           # [n_tuples] IO index within graph_t
    value: np.ndarray            # [n_tuples] the bidding agent's value
    target: np.ndarray           # [n_tuples] observed bid
    episode_id: str = ""
    t: int = 0

    @property
    def n_tuples(self) -> int:
        return int(self.target.shape[0])


def graph_seed(episode_seed: int, t: int) -> list[int]:
    return [int(episode_seed), int(t)]


def episode_graphs(record: EpisodeRecord, cap_m: int = 64,
                   n_categories: int = 4) -> tuple[list, list[AuctionGraph]]:
    states = states_from_record(record)
    graphs = [build_graph(s, cap_m, graph_seed(record.seed, s.t), n_categories) for s in states]
    return states, graphs


def episode_transitions(record: EpisodeRecord, cap_m: int = 64,
                        n_categories: int = 4) -> list[Transition]:
    states, graphs = episode_graphs(record, cap_m, n_categories)
    out = []
    for t, bids in enumerate(record.bids):
        state, g = states[t], graphs[t]
        bids = np.asarray(bids, dtype=float).reshape(state.n_agents, len(state.live))
        agent, row, value, target = [], [], [], []
        for i in range(state.n_agents):
            for k, v in zip(g.exposed[i], g.exposed_values[i]):
                agent.append(i)
                row.append(k)
                value.append(v)
                target.append(bids[i, k])
        ctx = np.stack([context_vector(state, i, n_categories) for i in range(state.n_agents)])
        out.append(Transition(g, graphs[t + 1], ctx, np.array(agent, dtype=np.int64),
                              np.array(row, dtype=np.int64), np.array(value),
                              np.array(target), record.episode_id, t))
    return out


@dataclass
class GraphModels:
    encoder: GnnEncoder
    idm: IdmModel
    ec: EcAggregator | None = None
    predictor: SelfPredictor | None = None
    ema: EmaTarget | None = None

    @classmethod
    def create(cls, seed: int, dim: int = 64, layers: int = 2, n_categories: int = 4,
               ec: bool = False, spl: bool = False, ema_decay: float = 0.99,
               heads: int = 4) -> "GraphModels":
        rng = np.random.default_rng([seed, 11])
        encoder = GnnEncoder(rng, dim, layers, n_categories)
        idm = IdmModel(rng, dim, n_categories)
        ec_mod = EcAggregator(rng, dim, heads) if ec else None
        predictor = SelfPredictor(rng, dim) if spl else None
        ema = EmaTarget(encoder, ema_decay) if spl else None
        return cls(encoder, idm, ec_mod, predictor, ema)

    def graph_modules(self) -> list[Module]:
        return [m for m in (self.encoder, self.ec) if m is not None]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for name in ("encoder", "idm", "ec", "predictor"):
            module = getattr(self, name)
            if module is not None:
                state.update({f"{name}.{k}": v for k, v in module.state_dict().items()})
        if self.ema is not None:
            state.update({f"ema.{k}": v for k, v in self.ema.model.state_dict().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name in ("encoder", "idm", "ec", "predictor"):
            module = getattr(self, name)
            if module is not None:
                prefix = name + "."
                module.load_state_dict({k[len(prefix):]: v for k, v in state.items()
                                        if k.startswith(prefix)})
        if self.ema is not None:
            self.ema.model.load_state_dict({k[4:]: v for k, v in state.items()
                                            if k.startswith("ema.")})

    def embed(self, x_agents: Tensor) -> Tensor:
        """[G, A, d] agent embeddings -> what the IDM and LDM see: per agent or joint."""
        if self.ec is None:
            return x_agents
        joint = self.ec(x_agents)
        return ops.stack([joint] * x_agents.shape[1], axis=1)


def assemble_batch(transitions: list[Transition], models: GraphModels
                   ) -> tuple[IdmBatch, Tensor, Tensor]:
    """Encode both graphs of every transition; gather the IDM tuples.

    Returns the batch and the raw agent embeddings at t and t+1 ([G, A, d]).
    """
    g = len(transitions)
    batch = batch_graphs([tr.graph_t for tr in transitions]
                         + [tr.graph_next for tr in transitions])
    x_all, h = models.encoder(batch)
    x_t_raw, x_next_raw = x_all[:g], x_all[g:]
    seen = models.embed(x_all)
    gi = np.concatenate([np.full(tr.n_tuples, j, dtype=np.int64)
                         for j, tr in enumerate(transitions)])
    agent = np.concatenate([tr.agent for tr in transitions])
    nodes = np.concatenate([batch.io_offset[j] + tr.io_row for j, tr in enumerate(transitions)])
    values = np.concatenate([tr.value for tr in transitions])
    target = np.concatenate([tr.target for tr in transitions])
    ctx = np.concatenate([tr.context[tr.agent] for tr in transitions])
    f = ops.concat([ops.getitem(h, nodes), Tensor(value_features(values))], axis=-1)
    idm_batch = IdmBatch(x_t=ops.getitem(seen, (gi, agent)),
                         x_next=ops.getitem(seen, (gi + g, agent)),
                         f=f, c=Tensor(ctx), target=target)
    return idm_batch, x_t_raw, x_next_raw


@dataclass
class GraphTrainConfig:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    gnn_lr: float | None = None
    spl_weight: float = 0.1
    max_grad_norm: float = 5.0
    log_every: int = 100


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    spl: list[float] = field(default_factory=list)


def _optimizers(models: GraphModels, cfg: GraphTrainConfig) -> list[Adam]:
    graph_params = [p for m in models.graph_modules() for p in m.parameters()]
    head_params = models.idm.parameters()
    if models.predictor is not None:
        head_params = head_params + models.predictor.parameters()
    gnn_lr = cfg.lr if cfg.gnn_lr is None else cfg.gnn_lr
    return [Adam(graph_params, gnn_lr, max_grad_norm=cfg.max_grad_norm),
            Adam(head_params, cfg.lr, max_grad_norm=cfg.max_grad_norm)]


def train_graph_models(transitions: list[Transition], models: GraphModels,
                       cfg: GraphTrainConfig, seed: int) -> TrainLog:
    """Minimise the IDM loss (plus the self-predictive term if enabled) jointly."""
    usable = [tr for tr in transitions if tr.n_tuples]
    if not usable:
        raise InputError("no transition carries a bid target")
    rng = np.random.default_rng([seed, 13])
    opts = _optimizers(models, cfg)
    out = TrainLog()
    for step in range(cfg.steps):
        idx = rng.choice(len(usable), size=min(cfg.batch_size, len(usable)), replace=False)
        chosen = [usable[j] for j in sorted(idx)]
        batch, x_t, _ = assemble_batch(chosen, models)
        loss = graph_loss(batch, models.idm)
        out.losses.append(loss.item())
        if models.predictor is not None:
            aux = _spl_term(chosen, models, x_t)
            out.spl.append(aux.item())
            loss = loss + aux * cfg.spl_weight
        for opt in opts:
            opt.zero_grad()
        loss.backward()
        for opt in opts:
            opt.step()
        if models.ema is not None:
            models.ema.update(models.encoder)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("graph step %d loss %.5f", step, out.losses[-1])
    return out


def _spl_term(chosen: list[Transition], models: GraphModels, x_t: Tensor) -> Tensor:
    target = models.ema(batch_graphs([tr.graph_next for tr in chosen]))
    summary = others_mean(x_t) if models.ec is None else \
        ops.stack([models.ec(x_t)] * x_t.shape[1], axis=1)
    d = x_t.shape[-1]
    return spl_loss(ops.reshape(x_t, (-1, d)), ops.reshape(summary, (-1, d)),
                    target.reshape(-1, d), models.predictor)


def predict_transitions(transitions: list[Transition], models: GraphModels,
                        chunk: int = 64) -> list[np.ndarray]:
    """Predicted bids for every tuple of every transition, no gradient."""
    out = []
    with no_grad():
        for s in range(0, len(transitions), chunk):
            part = transitions[s:s + chunk]
            batch, _, _ = assemble_batch(part, models)
            pred = models.idm(batch.x_t, batch.x_next, batch.f, batch.c).data
            sizes = np.cumsum([tr.n_tuples for tr in part])[:-1]
            out.extend(np.split(pred.astype(float), sizes))
    return out


def transition_bid_pairs(transitions: list[Transition], predictions: list[np.ndarray]):
    """(agent, predicted vector, true vector) per agent-step with exposed IOs."""
    for tr, pred in zip(transitions, predictions):
        for i in np.unique(tr.agent):
            sel = tr.agent == i
            yield int(i), pred[sel], tr.target[sel]


def rmse(pred: np.ndarray, true: np.ndarray) -> float:
    return math.sqrt(float(np.mean((np.asarray(pred) - np.asarray(true)) ** 2)))


def embed_episodes(records: list[EpisodeRecord], models: GraphModels, cap_m: int = 64,
                   n_categories: int = 4, budget_scale: float = 300.0) -> list[EpisodeLatents]:
    """Latent sequence [H + 1, A, d] of every episode as the downstream models see it."""
    out = []
    with no_grad():
        for record in records:
            _, graphs = episode_graphs(record, cap_m, n_categories)
            x, _ = models.encoder(batch_graphs(graphs))
            latents = models.embed(x).data.astype(np.float32)
            cond = np.stack([condition_vector(a, n_categories, budget_scale)
                             for a in record.agents])
            out.append(EpisodeLatents(record.episode_id, record.seed, latents, cond))
    return out

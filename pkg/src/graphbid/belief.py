"""Belief graphs for agents that only see their own auctions, and embedding distillation.

Agent i knows its own hubs, the IOs it is exposed to (with its own values) and
the non-exposed IOs sampled for its VN hub. Everything about the other agents
is replaced by ``h`` pseudo-agents whose hubs split the known IOs at random.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from graphbid.auction.env import AuctionState
from graphbid.auction.types import EpisodeRecord
from graphbid.errors import InputError
from graphbid.graph.build import (
    EDGE_FEATURES,
    IO_FEATURES,
    AuctionGraph,
    _assemble,
    batch_graphs,
    edge_feature,
    hub_features,
    io_features,
    pseudo_hub_features,
)
from graphbid.graph.encoder import GnnEncoder
from graphbid.idm import episode_graphs
from graphbid.ldm.data import EpisodeLatents, condition_vector
from graphbid.numkit import ops
from graphbid.numkit.optim import Adam
from graphbid.numkit.tensor import Tensor, no_grad

log = logging.getLogger(__name__)

DEFAULT_PSEUDO_AGENTS = 4
PSEUDO_EXPOSED_EDGE = np.array([1.0, 0.0, 0.0])  # exposed, value unknown


@dataclass
class OwnView:
    agent: int
    t: int
    hub_feat: np.ndarray                     # [2, F_hub] agent i's real VE/VN rows
    pseudo_feat: np.ndarray                  # [2, F_hub] template for pseudo hubs
    io_feat: np.ndarray                      # [n_known, F_io] from agent i's knowledge only
    io_ids: list[int]
    exposed: np.ndarray                      # [n_known] bool, True for agent i's own exposures
    values: np.ndarray                       # [n_known] own value, 0 where not exposed


def own_view(state: AuctionState, graph: AuctionGraph, agent: int,
             n_categories: int = 4) -> OwnView:
    """What ``agent`` knows at this step: its exposed IOs and its sampled others."""
    ve, vn = graph.agent_hubs[agent]
    rows = sorted((graph.neighbors(ve) | graph.neighbors(vn)))
    rows = [r - graph.n_hubs for r in rows]
    exposed_rows = set(graph.exposed[agent].tolist())
    live = state.live
    io_feat, exposed, values = [], [], []
    for k in rows:
        io = live[k]
        own = {agent: io.value[agent]} if k in exposed_rows else {}
        io_feat.append(io_features(io, state.t, state.horizon, state.n_agents, values=own))
        exposed.append(k in exposed_rows)
        values.append(io.value.get(agent, 0.0) if k in exposed_rows else 0.0)
    return OwnView(agent=agent, t=state.t,
                   hub_feat=hub_features(state, agent, n_categories),
                   pseudo_feat=pseudo_hub_features(state, n_categories),
                   io_feat=np.array(io_feat).reshape(len(rows), IO_FEATURES),
                   io_ids=[live[k].id for k in rows],
                   exposed=np.array(exposed, dtype=bool), values=np.array(values))


@dataclass
class BeliefGraph:
    graph: AuctionGraph                      # agent_hubs row 0 is the real agent
    partition: np.ndarray                    # [h, n_known] True -> pseudo VE, False -> pseudo VN
    meta: dict = field(default_factory=dict)

    @property
    def h(self) -> int:
        return self.partition.shape[0]


def belief_partition(n_known: int, h: int, rng_seed, p: float = 0.5) -> np.ndarray:
    rng = np.random.default_rng(rng_seed)
    return rng.random((h, n_known)) < p


def build_belief_graph(view: OwnView, h: int = DEFAULT_PSEUDO_AGENTS, rng_seed=0,
                       p: float = 0.5) -> BeliefGraph:
    """Real hubs of the agent plus ``h`` pseudo-agent hub pairs over the known IOs."""
    if h < 1:
        raise InputError("need at least one pseudo agent")
    n_known = view.io_feat.shape[0]
    partition = belief_partition(n_known, h, rng_seed, p)
    hub_feat = np.concatenate([view.hub_feat] + [view.pseudo_feat] * h)
    n_hubs = 2 * (h + 1)
    pairs, feats = [], []
    for k in range(n_known):
        node = n_hubs + k
        if view.exposed[k]:
            pairs.append((0, node))
            feats.append(edge_feature(view.values[k]))
        else:
            pairs.append((1, node))
            feats.append(edge_feature(None))
    for j in range(h):
        ve, vn = 2 * (j + 1), 2 * (j + 1) + 1
        for k in range(n_known):
            pairs.append((ve if partition[j, k] else vn, n_hubs + k))
            feats.append(PSEUDO_EXPOSED_EDGE if partition[j, k] else np.zeros(EDGE_FEATURES))
    agent_hubs = [(2 * j, 2 * j + 1) for j in range(h + 1)]
    own_rows = np.flatnonzero(view.exposed)
    graph = _assemble(hub_feat.reshape(-1, view.hub_feat.shape[1]), view.io_feat, pairs, feats,
                      agent_hubs, view.io_ids, [own_rows], [view.values[own_rows]],
                      view.t, cap_m=0)
    return BeliefGraph(graph, partition, {"agent": view.agent})


def kd_loss(student, teacher) -> Tensor:
    """Mean squared error against teacher outputs, which carry no gradient."""
    student = ops.as_tensor(student)
    target = teacher.data if isinstance(teacher, Tensor) else np.asarray(teacher)
    if student.shape != target.shape:
        raise InputError(f"student shape {student.shape} != teacher shape {target.shape}")
    return ops.mse(student, Tensor(target.astype(student.data.dtype)))


def student_embed(graphs: list[BeliefGraph], student: GnnEncoder) -> Tensor:
    """Real-agent embedding for each belief graph, [G, d]."""
    x, _ = student(batch_graphs([bg.graph for bg in graphs]))
    return x[:, 0]


@dataclass
class KdSample:
    belief: BeliefGraph
    teacher: np.ndarray                      # [d] teacher embedding of the same agent/step


def distill(samples: list[KdSample], student: GnnEncoder, steps: int = 500,
            batch_size: int = 64, lr: float = 1e-3, seed: int = 0,
            log_every: int = 100) -> list[float]:
    """Train the student on fixed (belief graph, teacher embedding) pairs."""
    if not samples:
        raise InputError("distillation needs at least one sample")
    rng = np.random.default_rng([seed, 17])
    opt = Adam(student.parameters(), lr, max_grad_norm=5.0)
    losses = []
    for step in range(steps):
        idx = np.sort(rng.choice(len(samples), size=min(batch_size, len(samples)),
                                 replace=False))
        chosen = [samples[j] for j in idx]
        loss = kd_loss(student_embed([s.belief for s in chosen], student),
                       np.stack([s.teacher for s in chosen]))
        losses.append(loss.item())
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_every and step % log_every == 0:
            log.info("kd step %d loss %.5f", step, losses[-1])
    return losses


def kd_mse(samples: list[KdSample], student: GnnEncoder, chunk: int = 256) -> float:
    total, count = 0.0, 0
    with no_grad():
        for s in range(0, len(samples), chunk):
            part = samples[s:s + chunk]
            x = student_embed([p.belief for p in part], student).data
            diff = x - np.stack([p.teacher for p in part])
            total += float(np.sum(diff.astype(np.float64) ** 2))
            count += diff.size
    return total / max(count, 1)


def make_student(teacher: GnnEncoder, seed: int) -> GnnEncoder:
    return GnnEncoder(np.random.default_rng([seed, 19]), teacher.dim, len(teacher.layers),
                      teacher.n_categories)


def belief_seed(episode_seed: int, t: int, agent: int) -> list[int]:
    return [int(episode_seed), int(t), int(agent), 23]


def beliefs_for(states, graphs, episode_seed: int, n_categories: int = 4,
                h: int = DEFAULT_PSEUDO_AGENTS) -> list[list[BeliefGraph]]:
    """Belief graph per state and agent, [T+1][A]."""
    return [[build_belief_graph(own_view(s, g, i, n_categories), h,
                                belief_seed(episode_seed, s.t, i))
             for i in range(s.n_agents)] for s, g in zip(states, graphs)]


def kd_samples(records: list[EpisodeRecord], teacher: GnnEncoder, cap_m: int = 64,
               n_categories: int = 4, h: int = DEFAULT_PSEUDO_AGENTS) -> list[KdSample]:
    out = []
    for record in records:
        states, graphs = episode_graphs(record, cap_m, n_categories)
        beliefs = beliefs_for(states, graphs, record.seed, n_categories, h)
        with no_grad():
            x, _ = teacher(batch_graphs(graphs))
        for t, row in enumerate(beliefs):
            out.extend(KdSample(bg, x.data[t, i]) for i, bg in enumerate(row))
    return out


def student_episodes(records: list[EpisodeRecord], student: GnnEncoder, cap_m: int = 64,
                     n_categories: int = 4, budget_scale: float = 300.0,
                     h: int = DEFAULT_PSEUDO_AGENTS) -> list[EpisodeLatents]:
    """Latent sequences [H + 1, A, d] built from each agent's belief graphs only."""
    out = []
    for record in records:
        states, graphs = episode_graphs(record, cap_m, n_categories)
        beliefs = beliefs_for(states, graphs, record.seed, n_categories, h)
        with no_grad():
            x = student_embed([bg for row in beliefs for bg in row], student).data
        cond = np.stack([condition_vector(a, n_categories, budget_scale) for a in record.agents])
        out.append(EpisodeLatents(record.episode_id, record.seed,
                                  x.reshape(len(states), record.n_agents, -1).astype(np.float32),
                                  cond))
    return out

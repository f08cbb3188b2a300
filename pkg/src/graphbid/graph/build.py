"""Bipartite agent/IO graphs with two virtual hub nodes per agent.

Node layout of a single graph: hub rows first (VE_0, VN_0, VE_1, VN_1, ...),
IO rows after. Edges are undirected and stored in both directions; the
encoder adds self-loops. VE_i links to every live IO agent i is exposed to;
VN_i links to at most ``cap_m`` of the remaining live IOs, sampled uniformly
without replacement.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from graphbid.auction.env import AuctionState
from graphbid.auction.mechanism import AllocationRule

RULES = [r.value for r in AllocationRule]
IO_FEATURES = 7
EDGE_FEATURES = 3
HUB_FLAGS = 3  # exposed hub, non-exposed hub, pseudo agent


def hub_feature_dim(n_categories: int) -> int:
    return HUB_FLAGS + 9 + n_categories + len(RULES)


def context_dim(n_categories: int) -> int:
    return 4 + n_categories + len(RULES)


def io_features(io, t: int, horizon: int, n_agents: int,
                values: dict[int, float] | None = None) -> np.ndarray:
    """Agent-agnostic IO node features: value aggregates, exposure, slots, lifecycle."""
    vals = list((values if values is not None else io.value).values())
    mean_v = float(np.mean(vals)) if vals else 0.0
    max_v = float(np.max(vals)) if vals else 0.0
    span = io.t_end - io.t_start + 1
    return np.array([
        math.log1p(mean_v),
        math.log1p(max_v),
        len(io.exposure) / n_agents if values is None else 0.0,
        io.slots / 3.0,
        (t - io.t_start) / span,
        (io.t_end - t) / horizon,
        1.0,
    ])


def rule_onehot(rule: str) -> np.ndarray:
    out = np.zeros(len(RULES))
    out[RULES.index(rule)] = 1.0
    return out


def category_onehot(category: int, n_categories: int) -> np.ndarray:
    out = np.zeros(n_categories)
    out[category % n_categories] = 1.0
    return out


def agent_stats(state: AuctionState, i: int) -> np.ndarray:
    budget = state.agents[i].budget
    pace = budget / state.horizon
    last_ratio = state.last_cost[i] / state.last_value[i] if state.last_value[i] > 0 else 0.0
    last_wr = state.last_wins[i] / state.last_bids[i] if state.last_bids[i] > 0 else 0.0
    return np.array([
        float(np.clip(state.remaining_budget[i] / budget, -1.0, 1.0)),
        state.t / state.horizon,
        state.cum_cost[i] / budget,
        state.cum_value[i] / budget,
        math.log1p(state.last_cost[i] / pace),
        math.log1p(state.last_value[i] / pace),
        last_ratio,
        last_wr,
        1.0,
    ])


def hub_features(state: AuctionState, i: int, n_categories: int) -> np.ndarray:
    """Features for VE_i (first row) and VN_i (second row)."""
    base = np.concatenate([agent_stats(state, i),
                           category_onehot(state.agents[i].category, n_categories),
                           rule_onehot(state.rule)])
    ve = np.concatenate([[1.0, 0.0, 0.0], base])
    vn = np.concatenate([[0.0, 1.0, 0.0], base])
    return np.stack([ve, vn])


def pseudo_hub_features(state: AuctionState, n_categories: int) -> np.ndarray:
    base = np.concatenate([np.zeros(9 + n_categories), rule_onehot(state.rule)])
    base[1] = state.t / state.horizon
    return np.stack([np.concatenate([[1.0, 0.0, 1.0], base]),
                     np.concatenate([[0.0, 1.0, 1.0], base])])


def context_vector(state: AuctionState, i: int, n_categories: int) -> np.ndarray:
    """Per-agent, IO-independent context fed to the inverse dynamics model."""
    budget = state.agents[i].budget
    return np.concatenate([
        [float(np.clip(state.remaining_budget[i] / budget, -1.0, 1.0)),
         state.t / state.horizon,
         state.cum_cost[i] / budget,
         state.cum_value[i] / budget],
        category_onehot(state.agents[i].category, n_categories),
        rule_onehot(state.rule),
    ])


def edge_feature(value: float | None) -> np.ndarray:
    if value is None:
        return np.zeros(EDGE_FEATURES)
    return np.array([1.0, math.log1p(value), 0.0])


SELF_LOOP_FEATURE = np.array([0.0, 0.0, 1.0])


@dataclass
class AuctionGraph:
    hub_feat: np.ndarray            # [n_hubs, F_hub]
    io_feat: np.ndarray             # [n_ios, F_io]
    src: np.ndarray                 # directed edges, node indices
    dst: np.ndarray
    edge_feat: np.ndarray           # [n_edges, F_edge]
    agent_hubs: np.ndarray          # [n_agents, 2] node index of (VE_i, VN_i)
    io_ids: list[int]
    exposed: list[np.ndarray]       # per agent: IO row indices (0-based among IOs)
    exposed_values: list[np.ndarray]
    t: int = 0
    cap_m: int = 64
    meta: dict = field(default_factory=dict)

    @property
    def n_hubs(self) -> int:
        return self.hub_feat.shape[0]

    @property
    def n_ios(self) -> int:
        return self.io_feat.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.n_hubs + self.n_ios

    @property
    def n_agents(self) -> int:
        return self.agent_hubs.shape[0]

    def io_node(self, k: int) -> int:
        return self.n_hubs + k

    def neighbors(self, node: int) -> set[int]:
        return set(self.dst[self.src == node].tolist())

    def degree(self, node: int) -> int:
        return int((self.src == node).sum())


def _assemble(hub_feat, io_feat, pairs, feats, agent_hubs, io_ids, exposed, exposed_values,
              t, cap_m) -> AuctionGraph:
    if pairs:
        a = np.array(pairs, dtype=np.int64)
        src = np.concatenate([a[:, 0], a[:, 1]])
        dst = np.concatenate([a[:, 1], a[:, 0]])
        ef = np.concatenate([np.array(feats), np.array(feats)])
    else:
        src = dst = np.zeros(0, dtype=np.int64)
        ef = np.zeros((0, EDGE_FEATURES))
    return AuctionGraph(hub_feat=hub_feat, io_feat=io_feat.reshape(-1, IO_FEATURES), src=src,
                        dst=dst, edge_feat=ef, agent_hubs=np.asarray(agent_hubs, dtype=np.int64),
                        io_ids=io_ids, exposed=exposed, exposed_values=exposed_values, t=t,
                        cap_m=cap_m)


def build_graph(state: AuctionState, cap_m: int = 64, rng_seed=0,
                n_categories: int = 4) -> AuctionGraph:
    """Full-information graph of one pre-step auction state."""
    rng = np.random.default_rng(rng_seed)
    n = state.n_agents
    live = state.live
    hub_feat = np.concatenate([hub_features(state, i, n_categories) for i in range(n)]) \
        if n else np.zeros((0, hub_feature_dim(n_categories)))
    io_feat = np.array([io_features(io, state.t, state.horizon, n) for io in live])
    n_hubs = 2 * n
    pairs, feats, exposed, exposed_values = [], [], [], []
    for i in range(n):
        ve, vn = 2 * i, 2 * i + 1
        mine = [k for k, io in enumerate(live) if i in io.value]
        others = [k for k, io in enumerate(live) if i not in io.value]
        for k in mine:
            pairs.append((ve, n_hubs + k))
            feats.append(edge_feature(live[k].value[i]))
        if len(others) > cap_m:
            others = sorted(rng.choice(others, size=cap_m, replace=False).tolist())
        for k in others:
            pairs.append((vn, n_hubs + k))
            feats.append(edge_feature(None))
        exposed.append(np.array(mine, dtype=np.int64))
        exposed_values.append(np.array([live[k].value[i] for k in mine]))
    agent_hubs = [(2 * i, 2 * i + 1) for i in range(n)]
    return _assemble(hub_feat, io_feat, pairs, feats, agent_hubs, [io.id for io in live],
                     exposed, exposed_values, state.t, cap_m)


@dataclass
class GraphBatch:
    """Disjoint union of graphs; hubs of all graphs come before all IOs."""
    hub_feat: np.ndarray
    io_feat: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_feat: np.ndarray
    agent_hubs: np.ndarray          # [G, A, 2] global node indices
    io_offset: np.ndarray           # [G] global node index of each graph's first IO
    n_nodes: int

    @property
    def n_graphs(self) -> int:
        return self.agent_hubs.shape[0]


def batch_graphs(graphs: list[AuctionGraph]) -> GraphBatch:
    n_hubs_total = sum(g.n_hubs for g in graphs)
    hub_off, io_off = 0, n_hubs_total
    srcs, dsts, efs, hubs, io_offsets = [], [], [], [], []
    for g in graphs:
        remap = np.concatenate([hub_off + np.arange(g.n_hubs),
                                io_off + np.arange(g.n_ios)]).astype(np.int64)
        srcs.append(remap[g.src])
        dsts.append(remap[g.dst])
        efs.append(g.edge_feat)
        hubs.append(remap[g.agent_hubs])
        io_offsets.append(io_off)
        hub_off += g.n_hubs
        io_off += g.n_ios
    n_agents = {g.n_agents for g in graphs}
    if len(n_agents) > 1:
        raise ValueError("all graphs in a batch need the same number of agents")
    return GraphBatch(
        hub_feat=np.concatenate([g.hub_feat for g in graphs]),
        io_feat=np.concatenate([g.io_feat for g in graphs]),
        src=np.concatenate(srcs), dst=np.concatenate(dsts),
        edge_feat=np.concatenate(efs),
        agent_hubs=np.stack(hubs), io_offset=np.array(io_offsets, dtype=np.int64),
        n_nodes=io_off,
    )

"""The full bidding loop: embed, plan the next latent, read bids off the inverse dynamics.

Several episodes can be stepped in lockstep so that the diffusion sampler and
the networks see one large batch per step instead of many small ones.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from graphbid.align.plan import KpiWeights, PlanCandidate, PlanContext, ValueModel, \
    plan_many, plan_window
from graphbid.auction.env import AuctionEnv, AuctionState
from graphbid.auction.types import AuctionConfig, EpisodeRecord
from graphbid.errors import InputError
from graphbid.graph.build import batch_graphs, build_graph, context_vector
from graphbid.idm import GraphModels, graph_seed, value_features
from graphbid.ldm.data import LatentNorm, condition_vector
from graphbid.ldm.diffusion import LatentDiffusion
from graphbid.numkit.tensor import no_grad

log = logging.getLogger(__name__)

Policy = Callable[[AuctionState], np.ndarray]


@dataclass
class ActModels:
    graph: GraphModels
    latent_norm: LatentNorm
    ldm: LatentDiffusion
    value: ValueModel
    weights: KpiWeights = field(default_factory=KpiWeights)
    window: int = 16
    n_candidates: int = 16
    cap_m: int = 64
    n_categories: int = 4
    budget_scale: float = 300.0
    slack: float = 1.0


@dataclass
class ActTrace:
    """What the planner did at each step, for audits."""
    t: int
    agent: int
    plan: PlanCandidate
    remaining_budget: float


def _capped(bids: np.ndarray, remaining: float) -> np.ndarray:
    return np.minimum(bids, max(remaining, 0.0))


def _bid_rows(states: list[AuctionState], graphs, models: ActModels, x_seen: np.ndarray,
              h: np.ndarray, io_offset: np.ndarray, plans: dict, hard_budget: bool
              ) -> list[np.ndarray]:
    """Bid matrices [A, n_live] for the controlled agents of every episode."""
    gm = models.graph
    rows, xt, xn, fs, cs = [], [], [], [], []
    for e, (state, g) in enumerate(zip(states, graphs)):
        for (ee, i), (plan, next_latent) in plans.items():
            if ee != e or plan.fallback or len(g.exposed[i]) == 0:
                continue
            k = g.exposed[i]
            rows.append((e, i, k))
            xt.append(np.repeat(x_seen[e, i][None], len(k), axis=0))
            xn.append(np.repeat(next_latent[None], len(k), axis=0))
            fs.append(np.concatenate([h[io_offset[e] + k], value_features(g.exposed_values[i])],
                                     axis=1))
            cs.append(np.repeat(context_vector(state, i, models.n_categories)[None], len(k),
                                axis=0))
    out = [np.zeros((s.n_agents, len(s.live))) for s in states]
    if not rows:
        return out
    with no_grad():
        pred = gm.idm(*(np.concatenate(a).astype(np.float32) for a in (xt, xn, fs, cs))).data
    pos = 0
    for e, i, k in rows:
        bids = pred[pos:pos + len(k)].astype(float)
        pos += len(k)
        if hard_budget:
            bids = _capped(bids, float(states[e].remaining_budget[i]))
        out[e][i, k] = bids
    return out


@dataclass
class ActHistory:
    """Latents seen so far in one episode, [H + 1, A, d]; rows after ``t`` are unused."""
    episode_seed: int
    latents: np.ndarray
    cond: np.ndarray            # [A, c]

    @classmethod
    def start(cls, state: AuctionState, episode_seed: int, models: ActModels) -> "ActHistory":
        return cls(int(episode_seed),
                   np.zeros((state.horizon + 1, state.n_agents, models.graph.encoder.dim)),
                   np.stack([condition_vector(a, models.n_categories, models.budget_scale)
                             for a in state.agents]))


def act_step(states: Sequence[AuctionState], histories: Sequence[ActHistory],
             models: ActModels, controlled: Sequence[int], seed: int = 0,
             hard_budget: bool = True, trace: list | None = None) -> list[np.ndarray]:
    """One decision step for several episodes at the same time index.

    Returns a bid matrix [A, n_live] per episode with only the ``controlled``
    rows filled; ``histories`` are updated with the current latents.
    """
    t = states[0].t
    horizon = states[0].horizon
    if any(s.t != t or s.horizon != horizon for s in states):
        raise InputError("lockstep acting needs states at one time index and horizon")
    gm = models.graph
    graphs = [build_graph(s, models.cap_m, graph_seed(hist.episode_seed, t), models.n_categories)
              for s, hist in zip(states, histories)]
    batch = batch_graphs(graphs)
    with no_grad():
        x, h = gm.encoder(batch)
        seen = gm.embed(x).data.astype(np.float64)
    h = h.data.astype(np.float64)
    start = plan_window(t, horizon, models.window)
    mask = np.arange(start, start + models.window) <= t
    contexts, keys = [], []
    for e, (state, hist) in enumerate(zip(states, histories)):
        hist.latents[t] = seen[e]
        z = models.latent_norm.apply(hist.latents[start:start + models.window])
        z = np.where(mask[:, None, None], z, 0.0)
        for i in controlled:
            contexts.append(PlanContext(z[:, i], mask, hist.cond[i], start, t, horizon,
                                        float(state.remaining_budget[i])))
            keys.append((e, i))
    chosen, _ = plan_many(contexts, models.n_candidates, models.ldm, models.value,
                          models.weights, np.random.default_rng([seed, t, 47]), models.slack)
    plans = {}
    for key, ctx, plan in zip(keys, contexts, chosen):
        nxt = None if plan.fallback else models.latent_norm.invert(plan.traj[ctx.next_index])
        plans[key] = (plan, nxt)
        if trace is not None:
            trace.append(ActTrace(t, key[1], plan, ctx.remaining_budget))
    return _bid_rows(list(states), graphs, models, seen, h, batch.io_offset, plans, hard_budget)


def act(state: AuctionState, history: ActHistory, models: ActModels,
        controlled: Sequence[int], seed: int = 0, hard_budget: bool = True) -> np.ndarray:
    """Bid matrix for one episode at one step; rows of uncontrolled agents are zero."""
    return act_step([state], [history], models, controlled, seed, hard_budget)[0]


def act_batch(envs: Sequence[AuctionEnv], models: ActModels, controlled: Sequence[int],
              others: Sequence[Policy] | None = None, seed: int = 0,
              trace: list | None = None) -> list[EpisodeRecord]:
    """Run every environment to completion with ``controlled`` agents driven by the planner.

    ``others`` gives one policy per environment for the remaining agents (zero
    bids when omitted). Returns the finished episode records.
    """
    if not envs:
        return []
    if any(env.state.t != 0 for env in envs):
        raise InputError("lockstep acting needs fresh environments")
    histories = [ActHistory.start(env.state, env.seed, models) for env in envs]
    rows = list(controlled)
    while not envs[0].done:
        mine = act_step([env.state for env in envs], histories, models, controlled, seed,
                        envs[0].hard_budget, trace)
        for e, env in enumerate(envs):
            bids = others[e](env.state).copy() if others is not None \
                else np.zeros_like(mine[e])
            bids[rows] = mine[e][rows]
            env.step(bids)
    return [env.record for env in envs]


def run_policy_batch(config: AuctionConfig, seeds: Sequence[int], policies: Sequence[Policy],
                     hard_budget: bool | None = None) -> list[EpisodeRecord]:
    """Plain rollout of callable policies, one per seed."""
    out = []
    for s, policy in zip(seeds, policies):
        env = AuctionEnv(config, s, hard_budget)
        while not env.done:
            env.step(policy(env.state))
        out.append(env.record)
    return out


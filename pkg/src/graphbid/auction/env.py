"""Synthetic multi-agent auction: IO generation and step dynamics.

IOs arrive as a Poisson stream. Each one stays live for a geometric number of
steps (capped by the horizon) and is auctioned at every live step. Values are
hierarchical: a lognormal base value per IO, scaled by a per-(agent, topic)
affinity drawn once per episode and a small per-pair perturbation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from graphbid.auction.mechanism import allocate_and_price
from graphbid.auction.types import (
    AgentProfile,
    AuctionConfig,
    EpisodeRecord,
    ImpressionOpportunity,
    StepOutcome,
)
from graphbid.errors import InputError

Policy = Callable[["AuctionState"], np.ndarray]


def episode_streams(seed: int) -> list[np.random.Generator]:
    """Independent generators for agents, IOs and conversions of one episode."""
    children = np.random.SeedSequence(seed).spawn(3)
    return [np.random.default_rng(c) for c in children]


def sample_agents(config: AuctionConfig, seed: int) -> tuple[list[AgentProfile], np.ndarray]:
    """Agent profiles plus the [n_agents, n_topics] value-affinity table."""
    rng = episode_streams(seed)[0]
    agents = []
    for i in range(config.n_agents):
        category = i % config.n_categories if config.fixed_categories \
            else int(rng.integers(config.n_categories))
        budget = float(rng.uniform(config.budget_low, config.budget_high))
        agents.append(AgentProfile(i, category, budget))
    affinity = np.exp(rng.normal(0.0, config.affinity_sigma, size=(config.n_agents,
                                                                    config.n_topics)))
    return agents, affinity


def generate_ios(config: AuctionConfig, seed: int,
                 affinity: np.ndarray | None = None) -> list[list[ImpressionOpportunity]]:
    """IO arrivals per time-step; deterministic given the seed."""
    config.validate()
    if affinity is None:
        affinity = sample_agents(config, seed)[1]
    rng = episode_streams(seed)[1]
    p_end = 1.0 / config.mean_lifecycle
    stream: list[list[ImpressionOpportunity]] = []
    next_id = 0
    for t in range(config.horizon):
        arrivals = []
        for _ in range(int(rng.poisson(config.arrival_rate))):
            length = int(rng.geometric(p_end))
            t_end = min(t + length - 1, config.horizon - 1)
            topic = int(rng.integers(config.n_topics))
            exposed = np.flatnonzero(rng.random(config.n_agents) < config.exposure_prob)
            if exposed.size == 0:
                exposed = np.array([rng.integers(config.n_agents)])
            slots = min(int(rng.integers(1, config.max_slots + 1)), exposed.size)
            base = float(np.exp(rng.normal(config.base_value_mu, config.base_value_sigma)))
            noise = np.exp(rng.normal(0.0, config.pair_noise_sigma, size=exposed.size))
            value = {int(a): float(base * affinity[a, topic] * n) for a, n in zip(exposed, noise)}
            arrivals.append(ImpressionOpportunity(next_id, t, t_end, slots, topic,
                                                  tuple(int(a) for a in exposed), value))
            next_id += 1
        stream.append(arrivals)
    return stream


@dataclass
class AuctionState:
    t: int
    horizon: int
    rule: str
    agents: list[AgentProfile]
    ios: list[ImpressionOpportunity]
    live: list[ImpressionOpportunity]
    cum_cost: np.ndarray
    cum_value: np.ndarray
    cum_wins: np.ndarray
    cum_bids: np.ndarray
    last_cost: np.ndarray
    last_value: np.ndarray
    last_wins: np.ndarray
    last_bids: np.ndarray
    stochastic_conversions: bool = False
    conversion_rng: np.random.Generator | None = field(default=None, repr=False)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def done(self) -> bool:
        return self.t >= self.horizon

    @property
    def budgets(self) -> np.ndarray:
        return np.array([a.budget for a in self.agents])

    @property
    def remaining_budget(self) -> np.ndarray:
        return self.budgets - self.cum_cost

    def exposure_mask(self) -> np.ndarray:
        mask = np.zeros((self.n_agents, len(self.live)), dtype=bool)
        for k, io in enumerate(self.live):
            mask[list(io.exposure), k] = True
        return mask

    def value_matrix(self) -> np.ndarray:
        values = np.zeros((self.n_agents, len(self.live)))
        for k, io in enumerate(self.live):
            for a, v in io.value.items():
                values[a, k] = v
        return values


def live_at(ios: list[ImpressionOpportunity], t: int) -> list[ImpressionOpportunity]:
    return [io for io in ios if io.live_at(t)]


def initial_state(config: AuctionConfig, seed: int) -> AuctionState:
    agents, affinity = sample_agents(config, seed)
    ios = [io for step in generate_ios(config, seed, affinity) for io in step]
    n = config.n_agents
    zeros = np.zeros(n)
    return AuctionState(
        t=0, horizon=config.horizon, rule=config.rule, agents=agents, ios=ios,
        live=live_at(ios, 0), cum_cost=zeros.copy(), cum_value=zeros.copy(),
        cum_wins=np.zeros(n, dtype=np.int64), cum_bids=np.zeros(n, dtype=np.int64),
        last_cost=zeros.copy(), last_value=zeros.copy(),
        last_wins=np.zeros(n, dtype=np.int64), last_bids=np.zeros(n, dtype=np.int64),
        stochastic_conversions=config.stochastic_conversions,
        conversion_rng=episode_streams(seed)[2],
    )


def _realize(value: float, state: AuctionState) -> float:
    if not state.stochastic_conversions:
        return value
    whole = math.floor(value)
    return float(whole + (state.conversion_rng.random() < value - whole))


def step(state: AuctionState, bid_matrix, hard_budget: bool) -> tuple[AuctionState, StepOutcome]:
    """Run one auction per live IO and return the advanced state and the outcome.

    ``bid_matrix`` is [n_agents, n_live] aligned with ``state.live``; zero means
    no bid. With ``hard_budget`` an agent whose remaining budget is below its
    bid is treated as bidding zero on that IO. IOs clear in id order.
    """
    if state.done:
        raise InputError("episode already finished")
    bids = np.asarray(bid_matrix, dtype=float)
    if bids.size == 0:
        bids = bids.reshape(state.n_agents, len(state.live))
    if bids.shape != (state.n_agents, len(state.live)):
        raise InputError(f"bid matrix shape {bids.shape} != {(state.n_agents, len(state.live))}")
    if not np.isfinite(bids).all() or (bids < 0).any():
        raise InputError("bids must be finite and nonnegative")
    if ((bids > 0) & ~state.exposure_mask()).any():
        raise InputError("bid placed on an IO the agent is not exposed to")

    n = state.n_agents
    cost, value = np.zeros(n), np.zeros(n)
    wins, submitted = np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64)
    spent = state.cum_cost.copy()
    budgets = state.budgets
    winners_all, prices_all = [], []
    for k, io in enumerate(state.live):
        offer = {}
        for a in io.exposure:
            b = float(bids[a, k])
            if b > 0 and hard_budget and budgets[a] - spent[a] < b:
                b = 0.0
            offer[a] = b
            if b > 0:
                submitted[a] += 1
        result = allocate_and_price(offer, io.slots, state.rule)
        winners_all.append([a for a, _ in result])
        prices_all.append([p for _, p in result])
        for a, price in result:
            cost[a] += price
            spent[a] += price
            value[a] += _realize(io.value[a], state)
            wins[a] += 1

    outcome = StepOutcome(
        t=state.t, io_ids=[io.id for io in state.live], winners=winners_all,
        prices=prices_all, cost=cost.tolist(), value=value.tolist(),
        wins=wins.tolist(), bids_submitted=submitted.tolist(),
    )
    t_next = state.t + 1
    nxt = replace(
        state, t=t_next, live=live_at(state.ios, t_next),
        cum_cost=state.cum_cost + cost, cum_value=state.cum_value + value,
        cum_wins=state.cum_wins + wins, cum_bids=state.cum_bids + submitted,
        last_cost=cost, last_value=value, last_wins=wins, last_bids=submitted,
    )
    return nxt, outcome


class AuctionEnv:
    """Stateful wrapper that also records an EpisodeRecord."""

    def __init__(self, config: AuctionConfig, seed: int, hard_budget: bool | None = None,
                 episode_id: str | None = None):
        self.config = config
        self.seed = int(seed)
        self.hard_budget = config.hard_budget if hard_budget is None else hard_budget
        self.state = initial_state(config, self.seed)
        self.record = EpisodeRecord(
            episode_id=episode_id or f"{config.config_hash()[:12]}:{self.seed}",
            seed=self.seed, config=config.to_dict(), agents=list(self.state.agents),
            ios=list(self.state.ios),
        )

    @property
    def done(self) -> bool:
        return self.state.done

    def step(self, bid_matrix) -> StepOutcome:
        bids = np.asarray(bid_matrix, dtype=float).reshape(self.state.n_agents,
                                                           len(self.state.live))
        self.state, outcome = step(self.state, bids, self.hard_budget)
        self.record.bids.append(bids.tolist())
        self.record.outcomes.append(outcome)
        return outcome


def run_episode(config: AuctionConfig, policy: Policy, seed: int,
                hard_budget: bool | None = None, episode_id: str | None = None,
                strategies: list[dict] | None = None) -> EpisodeRecord:
    env = AuctionEnv(config, seed, hard_budget, episode_id)
    while not env.done:
        env.step(policy(env.state))
    env.record.strategies = strategies or []
    return env.record


def replay(record: EpisodeRecord, hard_budget: bool | None = None):
    """Yield (state, bids, outcome) for each step, re-simulating from the seed."""
    config = AuctionConfig.from_dict(record.config)
    hb = config.hard_budget if hard_budget is None else hard_budget
    state = initial_state(config, record.seed)
    for bids in record.bids:
        before = state
        state, outcome = step(state, np.asarray(bids, dtype=float).reshape(
            state.n_agents, len(state.live)), hb)
        yield before, bids, outcome


def states_from_record(record: EpisodeRecord) -> list[AuctionState]:
    """Pre-step states of a stored episode, rebuilt from its own outcomes.

    Uses the stored costs and values rather than re-running the auction so that
    stochastic conversions stay as recorded.
    """
    config = AuctionConfig.from_dict(record.config)
    state = initial_state(config, record.seed)
    state.agents = list(record.agents)
    state.ios = list(record.ios)
    state.live = live_at(state.ios, 0)
    states = []
    for out in record.outcomes:
        states.append(state)
        cost, value = np.array(out.cost), np.array(out.value)
        wins, bids = np.array(out.wins), np.array(out.bids_submitted)
        t_next = state.t + 1
        state = replace(state, t=t_next, live=live_at(state.ios, t_next),
                        cum_cost=state.cum_cost + cost, cum_value=state.cum_value + value,
                        cum_wins=state.cum_wins + wins, cum_bids=state.cum_bids + bids,
                        last_cost=cost, last_value=value, last_wins=wins, last_bids=bids)
    states.append(state)
    return states


def custom_state(agents: list[AgentProfile], ios: list[ImpressionOpportunity], horizon: int,
                 rule: str = "FPA", stochastic_conversions: bool = False,
                 seed: int = 0) -> AuctionState:
    """State over a hand-written IO list; used for scripted scenarios."""
    n = len(agents)
    zeros = np.zeros(n)
    return AuctionState(
        t=0, horizon=horizon, rule=rule, agents=list(agents), ios=list(ios),
        live=live_at(ios, 0), cum_cost=zeros.copy(), cum_value=zeros.copy(),
        cum_wins=np.zeros(n, dtype=np.int64), cum_bids=np.zeros(n, dtype=np.int64),
        last_cost=zeros.copy(), last_value=zeros.copy(),
        last_wins=np.zeros(n, dtype=np.int64), last_bids=np.zeros(n, dtype=np.int64),
        stochastic_conversions=stochastic_conversions,
        conversion_rng=episode_streams(seed)[2],
    )

"""Records exchanged between the auction simulator, datasets and learners."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any

from graphbid.auction.mechanism import AllocationRule
from graphbid.errors import ConfigurationError, InputError


@dataclass
class AuctionConfig:
    n_agents: int = 4
    horizon: int = 32
    arrival_rate: float = 4.0
    mean_lifecycle: float = 3.0
    max_slots: int = 2
    exposure_prob: float = 0.6
    n_categories: int = 4
    n_topics: int = 4
    base_value_mu: float = 0.0
    base_value_sigma: float = 0.5
    affinity_sigma: float = 0.4
    pair_noise_sigma: float = 0.2
    budget_low: float = 100.0
    budget_high: float = 300.0
    rule: str = "FPA"
    hard_budget: bool = False
    stochastic_conversions: bool = False
    fixed_categories: bool = False

    def __post_init__(self):
        self.rule = AllocationRule.parse(self.rule).value
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.n_agents >= 1, "n_agents must be >= 1"),
            (self.horizon >= 1, "horizon must be >= 1"),
            (self.arrival_rate >= 0, "arrival_rate must be >= 0"),
            (self.mean_lifecycle >= 1, "mean_lifecycle must be >= 1"),
            (self.max_slots >= 1, "max_slots must be >= 1"),
            (0 < self.exposure_prob <= 1, "exposure_prob must lie in (0, 1]"),
            (self.n_categories >= 1 and self.n_topics >= 1, "need >= 1 category and topic"),
            (self.base_value_sigma >= 0 and self.affinity_sigma >= 0
             and self.pair_noise_sigma >= 0, "value spreads must be >= 0"),
            (0 < self.budget_low <= self.budget_high, "need 0 < budget_low <= budget_high"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigurationError(message)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AuctionConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown auction keys: {sorted(unknown)}")
        return cls(**data)

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())


def stable_hash(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class ImpressionOpportunity:
    id: int
    t_start: int
    t_end: int
    slots: int
    topic: int
    exposure: tuple[int, ...]
    value: dict[int, float]

    def __post_init__(self):
        if self.t_start > self.t_end:
            raise InputError(f"IO {self.id}: lifecycle ends before it starts")
        if not self.exposure:
            raise InputError(f"IO {self.id}: empty exposure set")
        if not 1 <= self.slots <= len(self.exposure):
            raise InputError(f"IO {self.id}: slots must be in [1, |exposure|]")

    def live_at(self, t: int) -> bool:
        return self.t_start <= t <= self.t_end

    def to_json(self) -> dict:
        return {"id": self.id, "t_start": self.t_start, "t_end": self.t_end,
                "slots": self.slots, "topic": self.topic, "exposure": list(self.exposure),
                "value": [[a, v] for a, v in sorted(self.value.items())]}

    @classmethod
    def from_json(cls, d: dict) -> "ImpressionOpportunity":
        return cls(d["id"], d["t_start"], d["t_end"], d["slots"], d["topic"],
                   tuple(d["exposure"]), {int(a): float(v) for a, v in d["value"]})


@dataclass
class AgentProfile:
    id: int
    category: int
    budget: float
    cpa_target: float | None = None

    def __post_init__(self):
        if not self.budget > 0:
            raise InputError(f"agent {self.id}: budget must be positive")

    def to_json(self) -> dict:
        return {"id": self.id, "category": self.category, "budget": self.budget,
                "cpa_target": self.cpa_target}

    @classmethod
    def from_json(cls, d: dict) -> "AgentProfile":
        return cls(d["id"], d["category"], d["budget"], d.get("cpa_target"))


@dataclass
class StepOutcome:
    t: int
    io_ids: list[int]
    winners: list[list[int]]
    prices: list[list[float]]
    cost: list[float]
    value: list[float]
    wins: list[int]
    bids_submitted: list[int]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "StepOutcome":
        return cls(**d)


@dataclass
class EpisodeRecord:
    episode_id: str
    seed: int
    config: dict
    agents: list[AgentProfile]
    ios: list[ImpressionOpportunity]
    bids: list[list[list[float]]] = field(default_factory=list)
    outcomes: list[StepOutcome] = field(default_factory=list)
    strategies: list[dict] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return len(self.outcomes)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def cumulative_cost(self) -> list[float]:
        totals = [0.0] * self.n_agents
        for out in self.outcomes:
            for i, c in enumerate(out.cost):
                totals[i] += c
        return totals

    def cumulative_value(self) -> list[float]:
        totals = [0.0] * self.n_agents
        for out in self.outcomes:
            for i, v in enumerate(out.value):
                totals[i] += v
        return totals

    def to_json(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "seed": self.seed,
            "config": self.config,
            "agents": [a.to_json() for a in self.agents],
            "strategies": self.strategies,
            "ios": [io.to_json() for io in self.ios],
            "bids": self.bids,
            "outcomes": [o.to_json() for o in self.outcomes],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, d: dict) -> "EpisodeRecord":
        return cls(
            episode_id=d["episode_id"], seed=d["seed"], config=d["config"],
            agents=[AgentProfile.from_json(a) for a in d["agents"]],
            ios=[ImpressionOpportunity.from_json(io) for io in d["ios"]],
            bids=d["bids"],
            outcomes=[StepOutcome.from_json(o) for o in d["outcomes"]],
            strategies=d.get("strategies", []),
        )

"""Synthetic multi-agent ad auction environment and KPI engine."""
from graphbid.auction.env import (
    AuctionEnv,
    AuctionState,
    custom_state,
    generate_ios,
    initial_state,
    replay,
    run_episode,
    sample_agents,
    states_from_record,
    step,
)
from graphbid.auction.kpi import KPI_NAMES, KpiReport, Kpis, compute_kpis
from graphbid.auction.mechanism import AllocationRule, allocate_and_price, rank_bidders
from graphbid.auction.types import (
    AgentProfile,
    AuctionConfig,
    EpisodeRecord,
    ImpressionOpportunity,
    StepOutcome,
    stable_hash,
)

__all__ = [
    "AgentProfile", "AllocationRule", "AuctionConfig", "AuctionEnv", "AuctionState",
    "EpisodeRecord", "ImpressionOpportunity", "KPI_NAMES", "KpiReport", "Kpis",
    "StepOutcome", "allocate_and_price", "custom_state", "compute_kpis", "generate_ios", "initial_state",
    "rank_bidders", "replay", "run_episode", "sample_agents", "stable_hash",
    "states_from_record", "step",
]

"""KPI engine: return, CPA, ROI, win rate, budget adherence, social welfare."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from graphbid.auction.types import EpisodeRecord

KPI_NAMES = ("return", "cpa", "roi", "win_rate", "budget_adherence", "social_welfare")


def cpa(cost: float, ret: float) -> float:
    if ret > 0:
        return cost / ret
    return math.inf if cost > 0 else 0.0


def roi(cost: float, ret: float) -> float:
    return (ret - cost) / cost if cost > 0 else 0.0


def win_rate(wins: int, bids: int) -> float:
    return wins / bids if bids > 0 else 0.0


@dataclass
class Kpis:
    ret: float
    cpa: float
    roi: float
    win_rate: float
    budget_adherence: float
    social_welfare: float

    def as_dict(self) -> dict[str, float]:
        d = asdict(self)
        d["return"] = d.pop("ret")
        return {k: d[k] for k in KPI_NAMES}


@dataclass
class AgentKpis(Kpis):
    episode_id: str = ""
    agent: int = 0
    cost: float = 0.0
    budget: float = 0.0


@dataclass
class KpiReport:
    per_agent: list[AgentKpis] = field(default_factory=list)
    aggregate: Kpis | None = None


def compute_kpis(episodes: EpisodeRecord | Iterable[EpisodeRecord],
                 budgets: Sequence[float] | None = None,
                 agents: Sequence[int] | None = None) -> KpiReport:
    """KPIs per (episode, agent) and pooled over all of them.

    Pooled CPA/ROI/win rate are ratios of totals; pooled return is the mean per
    agent-episode; budget adherence is the fraction of agent-episodes whose
    spend stayed within budget; social welfare is the mean per-episode sum of
    returns over all advertisers. ``agents`` restricts the per-agent rows (and
    pooled return/CPA/ROI/win rate/adherence) to a subset, e.g. the agents a
    planner controls; welfare always covers everyone.
    """
    if isinstance(episodes, EpisodeRecord):
        episodes = [episodes]
    episodes = list(episodes)
    report = KpiReport()
    tot_cost = tot_ret = 0.0
    tot_wins = tot_bids = 0
    within = rows = 0
    welfare = []
    for ep in episodes:
        costs = [0.0] * ep.n_agents
        rets = [0.0] * ep.n_agents
        wins = [0] * ep.n_agents
        bids = [0] * ep.n_agents
        for out in ep.outcomes:
            for i in range(ep.n_agents):
                costs[i] += out.cost[i]
                rets[i] += out.value[i]
                wins[i] += out.wins[i]
                bids[i] += out.bids_submitted[i]
        sw = sum(rets)
        welfare.append(sw)
        ep_budgets = budgets if budgets is not None else [a.budget for a in ep.agents]
        for i in (agents if agents is not None else range(ep.n_agents)):
            ok = costs[i] <= ep_budgets[i]
            report.per_agent.append(AgentKpis(
                ret=rets[i], cpa=cpa(costs[i], rets[i]), roi=roi(costs[i], rets[i]),
                win_rate=win_rate(wins[i], bids[i]), budget_adherence=float(ok),
                social_welfare=sw, episode_id=ep.episode_id, agent=i, cost=costs[i],
                budget=ep_budgets[i]))
            tot_cost += costs[i]
            tot_ret += rets[i]
            tot_wins += wins[i]
            tot_bids += bids[i]
            within += ok
            rows += 1
    if rows:
        report.aggregate = Kpis(
            ret=tot_ret / rows, cpa=cpa(tot_cost, tot_ret), roi=roi(tot_cost, tot_ret),
            win_rate=win_rate(tot_wins, tot_bids), budget_adherence=within / rows,
            social_welfare=sum(welfare) / len(welfare))
    return report

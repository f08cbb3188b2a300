"""Multi-slot allocation and pricing for first-price, GSP and VCG auctions."""
from __future__ import annotations

import math
from enum import Enum
from typing import Mapping

from graphbid.errors import InputError


class AllocationRule(str, Enum):
    FPA = "FPA"
    GSP = "GSP"
    VCG = "VCG"

    @classmethod
    def parse(cls, value) -> "AllocationRule":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise InputError(f"unknown allocation rule {value!r}") from None


def rank_bidders(bids: Mapping[int, float]) -> list[int]:
    """Agents with positive bids, highest first; ties go to the lower agent id."""
    return sorted((a for a, b in bids.items() if b > 0), key=lambda a: (-bids[a], a))


def allocate_and_price(bids: Mapping[int, float], slots: int,
                       rule) -> list[tuple[int, float]]:
    """Winners in rank order with the price each pays.

    Slots are identical (no position weights), so the VCG externality a winner
    imposes is the bid of the first loser, i.e. the (slots+1)-th highest bid.
    """
    rule = AllocationRule.parse(rule)
    if slots < 1:
        raise InputError(f"slots must be >= 1, got {slots}")
    for agent, bid in bids.items():
        if not math.isfinite(bid) or bid < 0:
            raise InputError(f"agent {agent} submitted invalid bid {bid!r}")
    ranked = rank_bidders(bids)
    winners = ranked[:slots]
    ordered = [bids[a] for a in ranked]
    out = []
    for r, agent in enumerate(winners):
        if rule is AllocationRule.FPA:
            price = bids[agent]
        elif rule is AllocationRule.GSP:
            price = ordered[r + 1] if r + 1 < len(ordered) else 0.0
        else:
            price = ordered[slots] if slots < len(ordered) else 0.0
        out.append((agent, float(price)))
    return out

"""Scoring sampled latent plans, budget-feasible best-of-N selection and RAFT rounds."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from graphbid.align.value import VALUE_KPIS, KpiNorm, ValueHead, predict_raw
from graphbid.auction.types import EpisodeRecord
from graphbid.errors import ConfigurationError, InputError
from graphbid.ldm.diffusion import LatentDiffusion, TrajectoryBatch, sample_inpaint, train_step
from graphbid.numkit.optim import Adam

log = logging.getLogger(__name__)

SPEND_INDEX = len(VALUE_KPIS)


@dataclass(frozen=True)
class KpiWeights:
    ret: float = 1.0
    cpa: float = -0.25
    roi: float = 0.25
    win_rate: float = 0.25
    social_welfare: float = 0.25

    def __post_init__(self):
        if not any(self.vector()):
            raise ConfigurationError("at least one KPI weight must be nonzero")

    def vector(self) -> np.ndarray:
        return np.array([self.ret, self.cpa, self.roi, self.win_rate, self.social_welfare])

    def scaled(self, factor: float) -> "KpiWeights":
        return KpiWeights(*(self.vector() * factor))

    @classmethod
    def only(cls, kpi: str) -> "KpiWeights":
        w = dict.fromkeys(("ret", "cpa", "roi", "win_rate", "social_welfare"), 0.0)
        w["ret" if kpi == "return" else kpi] = -1.0 if kpi == "cpa" else 1.0
        return cls(**w)


@dataclass
class ValueModel:
    head: ValueHead
    norm: KpiNorm

    def raw(self, z, cond, progress) -> np.ndarray:
        return predict_raw(self.head, self.norm, z, cond, progress)


def weighted_zscore(raw: np.ndarray, weights: KpiWeights, norm: KpiNorm) -> np.ndarray:
    """Sum of weight * z-score over the five KPIs; zero-spread KPIs are skipped."""
    raw = np.atleast_2d(raw)
    std = norm.std[:SPEND_INDEX]
    usable = std > 0
    if not usable.all():
        skipped = [VALUE_KPIS[j] for j in np.flatnonzero(~usable)]
        warnings.warn(f"zero spread for {skipped}; skipped in scoring", RuntimeWarning)
    z = (raw[:, :SPEND_INDEX] - norm.mean[:SPEND_INDEX]) / np.where(usable, std, 1.0)
    return (z * np.where(usable, weights.vector(), 0.0)).sum(axis=1)


def score_trajectory(traj: np.ndarray, cond: np.ndarray, value: ValueModel,
                     weights: KpiWeights, end_index: int, end_progress: float) -> float:
    """Weighted z-scored KPI prediction at the plan's last in-horizon position."""
    raw = value.raw(np.asarray(traj)[end_index][None], np.asarray(cond)[None],
                    np.array([end_progress]))
    return float(weighted_zscore(raw, weights, value.norm)[0])


def plan_window(t: int, horizon: int, window: int) -> int:
    """First episode step of the planning window while acting at step ``t``."""
    if window > horizon + 1:
        raise ConfigurationError(f"window {window} exceeds episode length {horizon + 1}")
    return min(max(0, t - window // 2 + 1), horizon + 1 - window)


@dataclass
class PlanContext:
    """A window with a known prefix, positioned in an episode."""
    z0: np.ndarray             # [T, d] normalised; unknown rows arbitrary
    mask: np.ndarray           # [T] known positions
    cond: np.ndarray           # [c]
    start: int                 # episode step of window row 0
    t: int                     # current step (last known row)
    horizon: int
    remaining_budget: float = math.inf

    @property
    def end_index(self) -> int:
        return min(len(self.mask) - 1, self.horizon - self.start)

    @property
    def next_index(self) -> int:
        return min(self.t - self.start + 1, len(self.mask) - 1)

    def progress(self, index: int) -> float:
        return (self.start + index) / self.horizon


@dataclass
class PlanCandidate:
    traj: np.ndarray | None
    score: float
    feasible: bool
    fallback: bool = False
    index: int = -1
    spend: float = math.nan


def plan_many(contexts: list[PlanContext], n: int, ldm: LatentDiffusion, value: ValueModel,
              weights: KpiWeights, rng: np.random.Generator,
              slack: float = 1.0) -> tuple[list[PlanCandidate], list[dict]]:
    """Best-of-n for several contexts in one sampling pass.

    Returns the chosen candidate per context and, for auditing, every scored
    candidate (scores, spends, feasibility).
    """
    if n < 1:
        raise InputError("need at least one candidate")
    reps = np.repeat(np.arange(len(contexts)), n)
    known = TrajectoryBatch(np.stack([contexts[j].z0 for j in reps]),
                            np.stack([contexts[j].mask for j in reps]),
                            np.stack([contexts[j].cond for j in reps]))
    samples = sample_inpaint(known, ldm, rng)
    ends = np.array([contexts[j].end_index for j in reps])
    nexts = np.array([contexts[j].next_index for j in reps])
    rows = np.arange(len(reps))
    z = np.concatenate([samples[rows, ends], samples[rows, nexts]])
    progress = np.concatenate([[contexts[j].progress(contexts[j].end_index) for j in reps],
                               [contexts[j].progress(contexts[j].next_index) for j in reps]])
    raw = value.raw(z, np.concatenate([known.cond, known.cond]), progress)
    scores = weighted_zscore(raw[:len(reps)], weights, value.norm)
    spend = raw[len(reps):, SPEND_INDEX]
    chosen, audit = [], []
    for j, ctx in enumerate(contexts):
        sl = slice(j * n, (j + 1) * n)
        feasible = spend[sl] <= ctx.remaining_budget * slack
        audit.append({"scores": scores[sl].copy(), "spend": spend[sl].copy(),
                      "feasible": feasible.copy()})
        if not feasible.any():
            chosen.append(PlanCandidate(None, -math.inf, False, fallback=True))
            continue
        masked = np.where(feasible, scores[sl], -np.inf)
        k = int(np.argmax(masked))
        chosen.append(PlanCandidate(samples[j * n + k], float(scores[sl][k]), True,
                                    index=k, spend=float(spend[sl][k])))
    return chosen, audit


def best_of_n_plan(context: PlanContext, n: int, ldm: LatentDiffusion, value: ValueModel,
                   weights: KpiWeights, rng: np.random.Generator,
                   slack: float = 1.0) -> PlanCandidate:
    return plan_many([context], n, ldm, value, weights, rng, slack)[0][0]


# ---------------------------------------------------------------------------
# rejection-sampling fine-tuning


@dataclass
class RaftPool:
    """Conditioning windows to sample from, with where their plans end.

    ``next_*`` locate the step right after the last known one, where the
    spend-to-go is checked against ``remaining_budget``.
    """
    batch: TrajectoryBatch
    end_index: np.ndarray
    end_progress: np.ndarray
    next_index: np.ndarray | None = None
    next_progress: np.ndarray | None = None
    remaining_budget: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.batch)


def raft_pool(episodes, latent_norm, window: int, stride: int = 1,
              records: list[EpisodeRecord] | None = None) -> RaftPool:
    """Planning contexts from stored latents: every agent at every stride-th decision step.

    With ``records`` (aligned with ``episodes``) each context also carries the
    agent's remaining budget so that RAFT can apply the budget predicate.
    """
    z0, masks, conds, ends, progress, ids = [], [], [], [], [], []
    nexts, next_progress, remaining = [], [], []
    for j, ep in enumerate(episodes):
        horizon = ep.latents.shape[0] - 1
        spent = np.zeros((horizon + 1, ep.latents.shape[1]))
        budgets = np.full(ep.latents.shape[1], math.inf)
        if records is not None:
            spent[1:] = np.cumsum([o.cost for o in records[j].outcomes], axis=0)
            budgets = np.array([a.budget for a in records[j].agents])
        for t in range(0, horizon, stride):
            start = plan_window(t, horizon, window)
            end = min(window - 1, horizon - start)
            mask = np.arange(start, start + window) <= t
            for i in range(ep.latents.shape[1]):
                z = latent_norm.apply(ep.latents[start:start + window, i])
                z0.append(np.where(mask[:, None], z, 0.0))
                masks.append(mask)
                conds.append(ep.cond[i])
                ends.append(end)
                progress.append((start + end) / horizon)
                nexts.append(t - start + 1)
                next_progress.append((t + 1) / horizon)
                remaining.append(budgets[i] - spent[t, i])
                ids.append(f"{ep.episode_id}/a{i}/t{t}")
    if not z0:
        raise InputError("no planning contexts")
    return RaftPool(TrajectoryBatch(np.stack(z0), np.stack(masks), np.stack(conds), ids),
                    np.array(ends), np.array(progress), np.array(nexts),
                    np.array(next_progress), np.array(remaining))


def score_samples(samples: np.ndarray, pool: RaftPool, idx: np.ndarray, value: ValueModel,
                  weights: KpiWeights) -> tuple[np.ndarray, np.ndarray]:
    rows = np.arange(len(idx))
    raw = value.raw(samples[rows, pool.end_index[idx]], pool.batch.cond[idx],
                    pool.end_progress[idx])
    return weighted_zscore(raw, weights, value.norm), raw


def sample_feasible(samples: np.ndarray, pool: RaftPool, idx: np.ndarray, value: ValueModel,
                    slack: float = 1.0) -> np.ndarray:
    """Budget predicate per sample; all True when the pool carries no budgets."""
    if pool.remaining_budget is None:
        return np.ones(len(idx), dtype=bool)
    rows = np.arange(len(idx))
    raw = value.raw(samples[rows, pool.next_index[idx]], pool.batch.cond[idx],
                    pool.next_progress[idx])
    return raw[:, SPEND_INDEX] <= pool.remaining_budget[idx] * slack


def mean_sample_score(ldm: LatentDiffusion, pool: RaftPool, m: int, value: ValueModel,
                      weights: KpiWeights, seed: int) -> tuple[float, np.ndarray]:
    """Mean score (and mean raw KPIs) of m fresh samples; deterministic given seed."""
    rng = np.random.default_rng([seed, 41])
    idx = np.sort(rng.choice(len(pool), size=m, replace=m > len(pool)))
    samples = sample_inpaint(pool.batch.subset(idx), ldm, rng)
    scores, raw = score_samples(samples, pool, idx, value, weights)
    return float(scores.mean()), raw.mean(axis=0)


def keep_count(m: int, q: float) -> int:
    return max(1, min(m, int(round(q * m))))


@dataclass
class RaftResult:
    round: int
    sample_ids: list[str]
    scores: np.ndarray
    kept_ids: list[str]
    advantage: np.ndarray | None = None
    feasible: np.ndarray | None = None
    trained_ids: set[str] = field(default_factory=set)
    losses: list[float] = field(default_factory=list)
    mean_score_after: float = math.nan
    kpi_means_after: np.ndarray | None = None

    @property
    def rejected_ids(self) -> set[str]:
        return set(self.sample_ids) - set(self.kept_ids)

    def row(self) -> dict:
        row = {"round": self.round, "mean_score": self.mean_score_after,
               "kept_fraction": len(self.kept_ids) / max(len(self.sample_ids), 1),
               "feasible_fraction": float(np.mean(self.feasible))
               if self.feasible is not None else 1.0}
        means = self.kpi_means_after if self.kpi_means_after is not None \
            else np.full(len(VALUE_KPIS), math.nan)
        row.update({f"mean_{k}": float(v) for k, v in zip(VALUE_KPIS, means)})
        return row


def raft_round(ldm: LatentDiffusion, pool: RaftPool, m: int, q: float, fine_tune_steps: int,
               value: ValueModel, weights: KpiWeights, seed: int, round_index: int = 1,
               lr: float = 5e-4, batch_size: int = 8, eval_seed: int | None = None,
               opt: Adam | None = None, group: int = 4, slack: float = 1.0) -> RaftResult:
    """Sample m plans, keep the top q fraction, fine-tune on the kept plans only.

    Plans failing the budget predicate are rejected whatever their score, so
    fewer than round(q m) may be kept when the pool carries budgets.

    Plans are drawn ``group`` at a time from the same context and ranked by
    their score minus the mean score of their group. Ranking raw scores would
    mostly compare contexts (early windows have more return left than late
    ones) and fine-tuning would then drift towards early-episode latents.
    """
    if m < 10:
        raise InputError("a RAFT round needs at least 10 samples")
    if not 0 < q <= 1:
        raise InputError("keep quantile must lie in (0, 1]")
    if group < 1:
        raise InputError("group size must be >= 1")
    rng = np.random.default_rng([seed, round_index, 43])
    n_ctx = -(-m // group)
    ctx = np.sort(rng.choice(len(pool), size=n_ctx, replace=n_ctx > len(pool)))
    idx = np.repeat(ctx, group)[:m]
    members = np.repeat(np.arange(n_ctx), group)[:m]
    samples = sample_inpaint(pool.batch.subset(idx), ldm, rng)
    scores, _ = score_samples(samples, pool, idx, value, weights)
    group_mean = np.bincount(members, scores) / np.bincount(members)
    advantage = scores - group_mean[members]
    feasible = sample_feasible(samples, pool, idx, value, slack)
    ids = [f"r{round_index}-s{j}" for j in range(m)]
    k = min(keep_count(m, q), int(feasible.sum()))
    eligible = np.flatnonzero(feasible)
    if k and np.all(advantage[eligible] == advantage[eligible[0]]):
        keep = np.sort(rng.choice(eligible, size=k, replace=False))
    else:
        order = eligible[np.argsort(-advantage[eligible], kind="stable")]
        keep = np.sort(order[:k])
    result = RaftResult(round_index, ids, scores, [ids[j] for j in keep], advantage=advantage,
                        feasible=feasible)
    if k == 0:
        log.warning("raft round %d: no budget-feasible sample, nothing to fine-tune on",
                    round_index)
        fine_tune_steps = 0
    kept = TrajectoryBatch(samples[keep], pool.batch.mask[idx[keep]], pool.batch.cond[idx[keep]],
                           [ids[j] for j in keep]) if k else None
    opt = opt or Adam(ldm.denoiser.parameters(), lr, max_grad_norm=1.0)
    for _ in range(fine_tune_steps):
        sel = np.sort(rng.choice(len(kept), size=min(batch_size, len(kept)), replace=False))
        part = kept.subset(sel)
        result.trained_ids.update(part.ids)
        result.losses.append(train_step(part, ldm, rng, opt))
    if eval_seed is not None:
        result.mean_score_after, result.kpi_means_after = mean_sample_score(
            ldm, pool, m, value, weights, eval_seed)
    log.info("raft round %d kept %d/%d mean after %.4f", round_index, k, m,
             result.mean_score_after)
    return result


def write_raft_log(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = ["round", "mean_score", "kept_fraction", "feasible_fraction"] + [f"mean_{k}" for k in VALUE_KPIS]
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k])
                             for k in fields})
    return path

"""Multi-KPI value head fitted by expectile regression on whole-episode KPIs and spend-to-go."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from graphbid.auction.types import EpisodeRecord
from graphbid.errors import ConfigurationError, InputError
from graphbid.numkit import ops
from graphbid.numkit.layers import MLP, Module
from graphbid.numkit.optim import Adam
from graphbid.numkit.tensor import Tensor, as_tensor, no_grad

log = logging.getLogger(__name__)

VALUE_KPIS = ("return", "cpa", "roi", "win_rate", "social_welfare")
SPEND = "spend"
HEAD_OUTPUTS = VALUE_KPIS + (SPEND,)


def value_targets(record: EpisodeRecord, agent: int) -> np.ndarray:
    """[H + 1, 6] regression targets for every step of one agent's episode.

    The first five columns are the whole-episode KPIs (identical on every row:
    the head has to infer them from the state it sees, which carries what was
    already won and spent). The last column is the spend still to come.
    Scoring a plan by whole-episode KPIs at its last step credits value won
    inside the plan; remainder KPIs there would favour plans that leave the
    budget unspent. CPA and ROI use denominators floored at 1 to stay finite.
    """
    h = record.horizon
    cost = np.array([o.cost[agent] for o in record.outcomes])
    value = np.array([o.value[agent] for o in record.outcomes])
    c, v = cost.sum(), value.sum()
    w = float(sum(o.wins[agent] for o in record.outcomes))
    b = float(sum(o.bids_submitted[agent] for o in record.outcomes))
    welfare = sum(sum(o.value) for o in record.outcomes)
    totals = [v, c / max(v, 1.0), (v - c) / max(c, 1.0), w / b if b > 0 else 0.0, welfare]
    out = np.zeros((h + 1, len(HEAD_OUTPUTS)))
    out[:, :len(VALUE_KPIS)] = totals
    out[:, -1] = np.concatenate([np.cumsum(cost[::-1])[::-1], [0.0]])
    return out


@dataclass
class KpiNorm:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, targets: np.ndarray) -> "KpiNorm":
        targets = np.asarray(targets, dtype=np.float64)
        return cls(targets.mean(0), targets.std(0))

    def safe_std(self) -> np.ndarray:
        return np.where(self.std > 0, self.std, 1.0)

    def apply(self, raw: np.ndarray) -> np.ndarray:
        return (np.asarray(raw) - self.mean) / self.safe_std()

    def invert(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) * self.safe_std() + self.mean


def expectile_loss(pred, target, tau: float) -> Tensor:
    """|tau - 1{u < 0}| u^2 with u = target - pred, averaged over every entry."""
    if not 0 < tau < 1:
        raise ConfigurationError(f"expectile tau must lie in (0, 1), got {tau}")
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target,
                        dtype=pred.data.dtype)
    if pred.shape[0] == 0:
        raise InputError("empty value batch")
    u = Tensor(target) - pred
    weight = np.where(u.data < 0, 1.0 - tau, tau).astype(pred.data.dtype)
    return ops.mean(u * u * Tensor(weight))


class ValueHead(Module):
    """(latent, condition, progress) -> normalised episode KPIs plus spend-to-go."""

    def __init__(self, rng: np.random.Generator, dim: int, cond_dim: int, hidden: int = 128):
        self.dim, self.cond_dim = dim, cond_dim
        self.net = MLP([dim + cond_dim + 1, hidden, hidden, len(HEAD_OUTPUTS)], rng)

    def forward(self, z, cond, progress) -> Tensor:
        z, cond = as_tensor(z), as_tensor(cond)
        if z.shape[-1] != self.dim or cond.shape[-1] != self.cond_dim:
            raise ConfigurationError("value head input width mismatch")
        p = Tensor(np.asarray(progress, dtype=z.data.dtype)[..., None])
        return self.net(ops.concat([z, cond, p], axis=-1))


def predict_raw(head: ValueHead, norm: KpiNorm, z, cond, progress) -> np.ndarray:
    with no_grad():
        out = head(np.asarray(z, dtype=np.float32), np.asarray(cond, dtype=np.float32),
                   progress).data
    return norm.invert(out.astype(np.float64))


@dataclass
class ValueBatch:
    z: np.ndarray              # [B, d] normalised latents
    cond: np.ndarray           # [B, c]
    progress: np.ndarray       # [B]
    target: np.ndarray         # [B, 6] normalised episode KPIs and spend-to-go

    def __len__(self) -> int:
        return self.z.shape[0]


def iql_value_update(batch: ValueBatch, head: ValueHead, tau: float = 0.7) -> Tensor:
    if len(batch) == 0:
        raise InputError("empty value batch")
    pred = head(batch.z.astype(np.float32), batch.cond.astype(np.float32), batch.progress)
    return expectile_loss(pred, batch.target, tau)


def fit_value_head(data: ValueBatch, head: ValueHead, steps: int = 1500, batch_size: int = 256,
                   lr: float = 1e-3, tau: float = 0.7, seed: int = 0,
                   log_every: int = 250) -> list[float]:
    rng = np.random.default_rng([seed, 37])
    opt = Adam(head.parameters(), lr, max_grad_norm=5.0)
    losses = []
    for step in range(steps):
        idx = np.sort(rng.choice(len(data), size=min(batch_size, len(data)), replace=False))
        part = ValueBatch(data.z[idx], data.cond[idx], data.progress[idx], data.target[idx])
        loss = iql_value_update(part, head, tau)
        losses.append(loss.item())
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_every and step % log_every == 0:
            log.info("value step %d loss %.5f", step, losses[-1])
    return losses


def value_dataset(episodes, records: list[EpisodeRecord], latent_norm,
                  kpi_norm: KpiNorm | None = None) -> tuple[ValueBatch, KpiNorm]:
    """Every (episode, agent, step) with its value targets, normalised.

    ``episodes`` are EpisodeLatents aligned with ``records``. The KPI
    normalisation is fitted here unless one is passed in, then frozen.
    """
    if len(episodes) != len(records):
        raise InputError("latents and records must align")
    zs, cs, ps, ts = [], [], [], []
    for ep, record in zip(episodes, records):
        h = record.horizon
        for i in range(ep.latents.shape[1]):
            zs.append(latent_norm.apply(ep.latents[:, i]))
            cs.append(np.repeat(ep.cond[i][None], h + 1, axis=0))
            ps.append(np.arange(h + 1) / h)
            ts.append(value_targets(record, i))
    if not zs:
        raise InputError("no episodes for the value head")
    raw = np.concatenate(ts)
    kpi_norm = kpi_norm or KpiNorm.fit(raw)
    return ValueBatch(np.concatenate(zs), np.concatenate(cs), np.concatenate(ps),
                      kpi_norm.apply(raw)), kpi_norm

"""Bid-scaling baselines and offline dataset generation."""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from statistics import NormalDist
from typing import Mapping, Sequence

import numpy as np

from graphbid.auction.env import AuctionState, run_episode
from graphbid.auction.storage import shard_name, write_manifest, write_shard
from graphbid.auction.types import AuctionConfig, EpisodeRecord
from graphbid.errors import ConfigurationError

SEED_STRIDE = 1_000_000


@dataclass(frozen=True)
class UniformScaler:
    alpha: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be positive")

    def multiplier(self, values: np.ndarray) -> np.ndarray:
        return np.full_like(np.asarray(values, dtype=float), self.alpha)

    def describe(self) -> dict:
        return {"kind": "uniform", "alpha": self.alpha}


@dataclass(frozen=True)
class NonUniformScaler:
    boundaries: tuple[float, ...]
    multipliers: tuple[float, ...]

    def __post_init__(self):
        if len(self.multipliers) != len(self.boundaries) + 1:
            raise ConfigurationError("need one more multiplier than boundaries")
        if any(b >= c for b, c in zip(self.boundaries, self.boundaries[1:])):
            raise ConfigurationError("boundaries must be strictly increasing")
        if any(not m > 0 for m in self.multipliers):
            raise ConfigurationError("multipliers must be positive")

    def bins(self, values) -> np.ndarray:
        return np.searchsorted(np.asarray(self.boundaries), np.asarray(values, dtype=float),
                               side="right")

    def multiplier(self, values) -> np.ndarray:
        return np.asarray(self.multipliers)[self.bins(values)]

    def describe(self) -> dict:
        return {"kind": "nonuniform", "boundaries": list(self.boundaries),
                "multipliers": list(self.multipliers)}


def uniform_bid(alpha: float, values: Mapping) -> dict:
    scaler = UniformScaler(alpha)
    return {k: scaler.alpha * v for k, v in values.items()}


def nonuniform_bid(scaler: NonUniformScaler, values: Mapping) -> dict:
    keys = list(values)
    mult = scaler.multiplier([values[k] for k in keys])
    return {k: float(m) * values[k] for k, m in zip(keys, mult)}


def value_quantiles(config: AuctionConfig, n_bins: int = 4) -> tuple[float, ...]:
    """Interior quantiles of the marginal per-pair value (lognormal by construction)."""
    sigma = math.sqrt(config.base_value_sigma ** 2 + config.affinity_sigma ** 2
                      + config.pair_noise_sigma ** 2)
    dist = NormalDist(config.base_value_mu, max(sigma, 1e-9))
    return tuple(math.exp(dist.inv_cdf(q / n_bins)) for q in range(1, n_bins))


class ScalingPolicy:
    """Every agent scales its own value by its scaler's multiplier."""

    def __init__(self, scalers: Sequence[UniformScaler | NonUniformScaler]):
        self.scalers = list(scalers)

    def __call__(self, state: AuctionState) -> np.ndarray:
        values = state.value_matrix()
        bids = np.zeros_like(values)
        for i, scaler in enumerate(self.scalers):
            bids[i] = scaler.multiplier(values[i]) * values[i]
        return bids * state.exposure_mask()

    def describe(self) -> list[dict]:
        return [s.describe() for s in self.scalers]


@dataclass(frozen=True)
class BidderConfig:
    p_uniform: float = 0.5
    alpha_low: float = 0.3
    alpha_high: float = 1.5
    mult_low: float = 0.3
    mult_high: float = 3.0
    n_bins: int = 4
    fixed_alphas: tuple[float, ...] | None = None

    def __post_init__(self):
        if not 0 <= self.p_uniform <= 1:
            raise ConfigurationError("p_uniform must lie in [0, 1]")
        if not 0 < self.alpha_low <= self.alpha_high:
            raise ConfigurationError("need 0 < alpha_low <= alpha_high")
        if not 0 < self.mult_low <= self.mult_high:
            raise ConfigurationError("need 0 < mult_low <= mult_high")
        if self.n_bins < 1:
            raise ConfigurationError("n_bins must be >= 1")


def _log_uniform(rng: np.random.Generator, lo: float, hi: float, size=None):
    return np.exp(rng.uniform(math.log(lo), math.log(hi), size=size))


def sample_scalers(config: AuctionConfig, bidders: BidderConfig,
                   seed: int) -> list[UniformScaler | NonUniformScaler]:
    rng = np.random.default_rng([seed, 7])
    boundaries = value_quantiles(config, bidders.n_bins)
    scalers: list[UniformScaler | NonUniformScaler] = []
    for i in range(config.n_agents):
        if bidders.fixed_alphas is not None:
            scalers.append(UniformScaler(float(bidders.fixed_alphas[i])))
            continue
        if rng.random() < bidders.p_uniform:
            scalers.append(UniformScaler(float(_log_uniform(rng, bidders.alpha_low,
                                                            bidders.alpha_high))))
        else:
            mult = _log_uniform(rng, bidders.mult_low, bidders.mult_high, size=bidders.n_bins)
            scalers.append(NonUniformScaler(boundaries, tuple(float(m) for m in mult)))
    return scalers


def episode_seed(base_seed: int, index: int) -> int:
    return base_seed * SEED_STRIDE + index


def simulate_episode(config: AuctionConfig, bidders: BidderConfig, seed: int) -> EpisodeRecord:
    policy = ScalingPolicy(sample_scalers(config, bidders, seed))
    return run_episode(config, policy, seed, strategies=policy.describe())


def _write_one_shard(args) -> dict:
    config_dict, bidders_dict, seeds, path = args
    config = AuctionConfig.from_dict(config_dict)
    bidders = BidderConfig(**bidders_dict)
    return write_shard(Path(path), (simulate_episode(config, bidders, s) for s in seeds))


def generate_dataset(config: AuctionConfig, n_episodes: int, seed: int, out_dir,
                     bidders: BidderConfig | None = None, shard_size: int = 100,
                     workers: int | None = None) -> dict:
    """Simulate ``n_episodes`` scaling-bidder episodes into shards plus a manifest."""
    bidders = bidders or BidderConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    workers = workers or int(os.environ.get("GRAPHBID_WORKERS", "1"))
    seeds = [episode_seed(seed, i) for i in range(n_episodes)]
    chunks = [seeds[i:i + shard_size] for i in range(0, n_episodes, shard_size)]
    bdict = asdict(bidders)
    jobs = [(config.to_dict(), bdict, chunk, str(out_dir / shard_name(j)))
            for j, chunk in enumerate(chunks)]
    try:
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                shards = list(pool.map(_write_one_shard, jobs))
        else:
            shards = [_write_one_shard(job) for job in jobs]
    except BaseException:
        for job in jobs:
            Path(job[3]).unlink(missing_ok=True)
            Path(job[3]).with_suffix(".jsonl.partial").unlink(missing_ok=True)
        raise
    seed_range = (episode_seed(seed, 0), episode_seed(seed, n_episodes))
    return write_manifest(out_dir, config.config_hash(), seed_range, shards,
                          extra={"config": config.to_dict(), "bidders": bdict})

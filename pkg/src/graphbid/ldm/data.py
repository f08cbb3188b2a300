"""Latent sequences, windows, normalisation and the embedding cache."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from graphbid.auction.types import AgentProfile
from graphbid.errors import InputError
from graphbid.graph.build import category_onehot
from graphbid.numkit.checkpoint import load_checkpoint, save_checkpoint


def cond_dim(n_categories: int) -> int:
    return n_categories + 1


def condition_vector(agent: AgentProfile, n_categories: int, budget_scale: float) -> np.ndarray:
    """Time-invariant agent features: category one-hot and scaled total budget."""
    return np.concatenate([category_onehot(agent.category, n_categories),
                           [agent.budget / budget_scale]])


@dataclass
class LatentNorm:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, sequences: np.ndarray, floor: float = 1e-3) -> "LatentNorm":
        flat = np.asarray(sequences, dtype=np.float64).reshape(-1, sequences.shape[-1])
        return cls(flat.mean(0), np.maximum(flat.std(0), floor))

    @classmethod
    def identity(cls, dim: int) -> "LatentNorm":
        return cls(np.zeros(dim), np.ones(dim))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def state(self) -> dict[str, np.ndarray]:
        return {"norm.mean": self.mean, "norm.std": self.std}

    @classmethod
    def from_state(cls, state: dict) -> "LatentNorm":
        return cls(np.asarray(state["norm.mean"], dtype=np.float64),
                   np.asarray(state["norm.std"], dtype=np.float64))


def sliding_windows(sequence: np.ndarray, window: int, stride: int = 1) -> np.ndarray:
    """[L, d] -> [n, window, d] for every start 0, stride, ... with a full window."""
    sequence = np.asarray(sequence)
    if len(sequence) < window:
        return np.zeros((0, window) + sequence.shape[1:], dtype=sequence.dtype)
    starts = range(0, len(sequence) - window + 1, stride)
    return np.stack([sequence[s:s + window] for s in starts])


@dataclass
class EpisodeLatents:
    """Embedding sequence of one episode as the downstream models see it."""
    episode_id: str
    seed: int
    latents: np.ndarray        # [L, A, d] per agent (joint copies when EC is on)
    cond: np.ndarray           # [A, c]

    def agent_sequence(self, agent: int) -> np.ndarray:
        return self.latents[:, agent]


def build_windows(episodes: list[EpisodeLatents], norm: LatentNorm, window: int,
                  stride: int = 1) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Normalised windows, their condition vectors and provenance ids."""
    zs, cs, ids = [], [], []
    for ep in episodes:
        for i in range(ep.latents.shape[1]):
            w = sliding_windows(norm.apply(ep.agent_sequence(i)), window, stride)
            zs.append(w)
            cs.append(np.repeat(ep.cond[i][None], len(w), axis=0))
            ids.extend(f"{ep.episode_id}/a{i}/s{s * stride}" for s in range(len(w)))
    if not zs:
        raise InputError("no episodes to window")
    return np.concatenate(zs), np.concatenate(cs), ids


def save_latents(path, episodes: list[EpisodeLatents], meta: dict | None = None) -> None:
    tensors = {}
    for j, ep in enumerate(episodes):
        tensors[f"ep{j:06d}.latents"] = ep.latents.astype(np.float32)
        tensors[f"ep{j:06d}.cond"] = ep.cond.astype(np.float64)
    info = dict(meta or {})
    info["episodes"] = [[ep.episode_id, ep.seed] for ep in episodes]
    save_checkpoint(Path(path), tensors, info)


def load_latents(path) -> tuple[list[EpisodeLatents], dict]:
    tensors, meta = load_checkpoint(Path(path))
    out = [EpisodeLatents(eid, int(seed), tensors[f"ep{j:06d}.latents"],
                          tensors[f"ep{j:06d}.cond"])
           for j, (eid, seed) in enumerate(meta["episodes"])]
    return out, meta

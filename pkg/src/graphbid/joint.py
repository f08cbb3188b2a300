"""Joint fine-tuning of the graph modules and the latent diffusion model.

After the two separate stages, each step encodes a short run of consecutive
auction graphs, applies the inverse-dynamics loss to the bids inside it and
the diffusion loss to the latent window it produces. Gradients of both reach
the encoder, which moves at a lower learning rate than the heads.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from graphbid.auction.types import EpisodeRecord
from graphbid.errors import InputError
from graphbid.graph.build import batch_graphs
from graphbid.idm import GraphModels, IdmBatch, Transition, episode_transitions, graph_loss, \
    value_features
from graphbid.ldm.data import LatentNorm, condition_vector
from graphbid.ldm.diffusion import LatentDiffusion, latent_loss, random_prefix_masks
from graphbid.numkit import ops
from graphbid.numkit.optim import Adam
from graphbid.numkit.tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class JointConfig:
    steps: int = 200
    episodes_per_step: int = 4
    lr: float = 2e-4
    gnn_lr: float = 5e-5
    ldm_weight: float = 1.0
    p_unconditional: float = 0.1
    max_grad_norm: float = 1.0
    log_every: int = 50


@dataclass
class JointLog:
    idm: list[float] = field(default_factory=list)
    ldm: list[float] = field(default_factory=list)


def joint_fine_tune(records: list[EpisodeRecord], models: GraphModels, ldm: LatentDiffusion,
                    norm: LatentNorm, window: int, cfg: JointConfig, seed: int,
                    cap_m: int = 64, n_categories: int = 4,
                    budget_scale: float = 300.0) -> JointLog:
    """Train encoder, IDM and denoiser together on windows of ``window`` steps.

    The latent normalisation stays frozen so that the diffusion model keeps
    the scale it was trained at.
    """
    if not records:
        raise InputError("joint fine-tuning needs episodes")
    if records[0].horizon + 1 < window:
        raise InputError(f"episodes of horizon {records[0].horizon} are shorter than the window")
    episodes: list[list[Transition]] = [episode_transitions(r, cap_m, n_categories)
                                        for r in records]
    conds = [np.stack([condition_vector(a, n_categories, budget_scale) for a in r.agents])
             for r in records]
    rng = np.random.default_rng([seed, 53])
    graph_params = [p for m in models.graph_modules() for p in m.parameters()]
    head_params = models.idm.parameters() + ldm.denoiser.parameters()
    opts = [Adam(graph_params, cfg.gnn_lr, max_grad_norm=cfg.max_grad_norm),
            Adam(head_params, cfg.lr, max_grad_norm=cfg.max_grad_norm)]
    dtype = ldm.dtype
    mean = Tensor(norm.mean.astype(dtype))
    inv_std = Tensor((1.0 / norm.std).astype(dtype))
    out = JointLog()
    for step in range(cfg.steps):
        pick = np.sort(rng.choice(len(records), size=min(cfg.episodes_per_step, len(records)),
                                  replace=False))
        runs = []
        for e in pick:
            start = int(rng.integers(0, len(episodes[e]) + 2 - window))
            runs.append(episodes[e][start:start + window - 1])
        batch, seen = _encode_runs(runs, models)
        n_agents = seen.shape[1]
        z = (seen - mean) * inv_std
        z = ops.reshape(z, (len(pick), window, n_agents, -1))
        z = ops.reshape(ops.transpose(z, (0, 2, 1, 3)), (len(pick) * n_agents, window, -1))
        mask = random_prefix_masks(rng, z.shape[0], window, cfg.p_unconditional)
        l_ldm = latent_loss(z, mask, np.concatenate([conds[e] for e in pick]), ldm, rng)
        loss = l_ldm * cfg.ldm_weight
        out.ldm.append(l_ldm.item())
        if len(batch.target):
            l_idm = graph_loss(batch, models.idm)
            loss = loss + l_idm
            out.idm.append(l_idm.item())
        for opt in opts:
            opt.zero_grad()
        loss.backward()
        for opt in opts:
            opt.step()
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("joint step %d ldm %.5f", step, out.ldm[-1])
    return out


def _encode_runs(runs: list[list[Transition]], models: GraphModels) -> tuple[IdmBatch, Tensor]:
    """Encode each run of consecutive transitions once: IDM tuples and the latent windows."""
    graphs, owner = [], []
    for run in runs:
        for tr in run:
            graphs.append(tr.graph_t)
            owner.append((tr, len(graphs) - 1))
        graphs.append(run[-1].graph_next)
    batch = batch_graphs(graphs)
    x, h = models.encoder(batch)
    seen = models.embed(x)
    gi = np.concatenate([np.full(tr.n_tuples, g, dtype=np.int64) for tr, g in owner])
    agent = np.concatenate([tr.agent for tr, _ in owner])
    nodes = np.concatenate([batch.io_offset[g] + tr.io_row for tr, g in owner])
    values = np.concatenate([tr.value for tr, _ in owner])
    f = ops.concat([ops.getitem(h, nodes), Tensor(value_features(values))], axis=-1)
    idm_batch = IdmBatch(x_t=ops.getitem(seen, (gi, agent)),
                         x_next=ops.getitem(seen, (gi + 1, agent)),
                         f=f, c=Tensor(np.concatenate([tr.context[tr.agent] for tr, _ in owner])),
                         target=np.concatenate([tr.target for tr, _ in owner]))
    return idm_batch, seen

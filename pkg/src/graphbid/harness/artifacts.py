"""Checkpoint bundles: parameters plus the hyperparameters needed to rebuild the modules."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from graphbid.align.plan import ValueModel
from graphbid.align.value import KpiNorm, ValueHead
from graphbid.errors import DependencyError
from graphbid.graph.encoder import GnnEncoder
from graphbid.idm import GraphModels
from graphbid.ldm.data import LatentNorm, cond_dim
from graphbid.ldm.denoiser import Denoiser
from graphbid.ldm.diffusion import LatentDiffusion
from graphbid.ldm.schedule import NoiseSchedule
from graphbid.numkit.checkpoint import load_checkpoint, save_checkpoint


def require(path: Path, stage: str) -> Path:
    """Fail with the name of the missing checkpoint and the stage that writes it."""
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"missing checkpoint {path}; run `graphbid {stage}` first")
    return path


def save_graph(path, models: GraphModels, hp: dict, extra: dict | None = None) -> Path:
    return save_checkpoint(path, models.state_dict(), {"kind": "graph", "hp": hp, **(extra or {})})


def load_graph(path, stage: str = "train-graph") -> tuple[GraphModels, dict]:
    tensors, meta = load_checkpoint(require(path, stage))
    hp = meta["hp"]
    models = GraphModels.create(0, dim=hp["dim"], layers=hp["layers"],
                                n_categories=hp["n_categories"], ec=hp["ec"], spl=hp["spl"])
    models.load_state_dict(tensors)
    return models, meta


def save_encoder(path, encoder: GnnEncoder, hp: dict, extra: dict | None = None) -> Path:
    return save_checkpoint(path, encoder.state_dict(), {"kind": "encoder", "hp": hp,
                                                        **(extra or {})})


def load_encoder(path, stage: str = "train-graph") -> tuple[GnnEncoder, dict]:
    tensors, meta = load_checkpoint(require(path, stage))
    hp = meta["hp"]
    encoder = GnnEncoder(np.random.default_rng(0), hp["dim"], hp["layers"], hp["n_categories"])
    encoder.load_state_dict(tensors)
    return encoder, meta


def save_ldm(path, model: LatentDiffusion, norm: LatentNorm, hp: dict,
             extra: dict | None = None) -> Path:
    tensors = {f"denoiser.{k}": v for k, v in model.denoiser.state_dict().items()}
    tensors.update(norm.state())
    return save_checkpoint(path, tensors, {"kind": "ldm", "hp": hp, **(extra or {})})


def load_ldm(path, stage: str = "train-ldm") -> tuple[LatentDiffusion, LatentNorm, dict]:
    tensors, meta = load_checkpoint(require(path, stage))
    hp = meta["hp"]
    denoiser = Denoiser(np.random.default_rng(0), hp["dim"], cond_dim(hp["n_categories"]),
                        channels=hp["channels"], blocks=hp["blocks"], kernel=hp["kernel"],
                        emb_dim=hp["emb_dim"])
    denoiser.load_state_dict({k[len("denoiser."):]: v for k, v in tensors.items()
                              if k.startswith("denoiser.")})
    model = LatentDiffusion(denoiser, NoiseSchedule.cosine(hp["diffusion_steps"]), hp["x0_clip"])
    return model, LatentNorm.from_state(tensors), meta


def save_value(path, value: ValueModel, hp: dict, extra: dict | None = None) -> Path:
    tensors = {f"head.{k}": v for k, v in value.head.state_dict().items()}
    tensors["kpi.mean"], tensors["kpi.std"] = value.norm.mean, value.norm.std
    return save_checkpoint(path, tensors, {"kind": "value", "hp": hp, **(extra or {})})


def load_value(path, stage: str = "align") -> tuple[ValueModel, dict]:
    tensors, meta = load_checkpoint(require(path, stage))
    hp = meta["hp"]
    head = ValueHead(np.random.default_rng(0), hp["dim"], cond_dim(hp["n_categories"]),
                     hidden=hp["hidden"])
    head.load_state_dict({k[len("head."):]: v for k, v in tensors.items()
                          if k.startswith("head.")})
    return ValueModel(head, KpiNorm(tensors["kpi.mean"], tensors["kpi.std"])), meta

"""Latent diffusion over temporal sequences of agent embeddings."""
from graphbid.ldm.data import (
    EpisodeLatents,
    LatentNorm,
    build_windows,
    cond_dim,
    condition_vector,
    load_latents,
    save_latents,
    sliding_windows,
)
from graphbid.ldm.denoiser import Denoiser, sinusoidal_embedding
from graphbid.ldm.diffusion import (
    LatentDiffusion,
    LdmTrainConfig,
    TrajectoryBatch,
    forecast_loglik,
    forecast_window,
    ldm_loss,
    random_prefix_masks,
    sample_inpaint,
    train_ldm,
    train_step,
)
from graphbid.ldm.schedule import NoiseSchedule, q_sample

__all__ = [
    "Denoiser", "EpisodeLatents", "LatentDiffusion", "LatentNorm", "LdmTrainConfig",
    "NoiseSchedule", "TrajectoryBatch", "build_windows", "cond_dim", "condition_vector",
    "forecast_loglik", "forecast_window", "ldm_loss", "load_latents", "q_sample",
    "random_prefix_masks", "sample_inpaint", "save_latents", "sinusoidal_embedding",
    "sliding_windows", "train_ldm", "train_step",
]

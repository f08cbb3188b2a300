"""Epsilon-prediction training, in-painting sampling and the forecasting bound."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from graphbid.errors import InputError
from graphbid.ldm.denoiser import Denoiser
from graphbid.ldm.schedule import NoiseSchedule, q_sample
from graphbid.numkit import ops
from graphbid.numkit.optim import Adam
from graphbid.numkit.tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrajectoryBatch:
    z0: np.ndarray             # [B, T, d]
    mask: np.ndarray           # [B, T], 1 = known
    cond: np.ndarray           # [B, c]
    ids: list = field(default_factory=list)

    def __post_init__(self):
        self.z0 = np.asarray(self.z0)
        self.mask = np.asarray(self.mask).astype(bool)
        self.cond = np.asarray(self.cond)
        if self.z0.ndim != 3 or self.mask.shape != self.z0.shape[:2] \
                or self.cond.shape[:1] != self.z0.shape[:1]:
            raise InputError("trajectory batch shapes disagree")
        if not np.isfinite(self.z0[self.mask]).all():
            raise InputError("known positions must be finite")

    def __len__(self) -> int:
        return self.z0.shape[0]

    def subset(self, idx) -> "TrajectoryBatch":
        idx = np.asarray(idx, dtype=np.int64)
        ids = [self.ids[i] for i in idx] if self.ids else []
        return TrajectoryBatch(self.z0[idx], self.mask[idx], self.cond[idx], ids)


@dataclass
class LatentDiffusion:
    denoiser: Denoiser
    schedule: NoiseSchedule
    x0_clip: float | None = 6.0   # bound on the clean-sequence estimate while sampling

    def eps(self, z: np.ndarray, n, cond: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.denoiser(z.astype(self.dtype), np.broadcast_to(n, z.shape[:1]),
                                 cond.astype(self.dtype)).data

    @property
    def dtype(self):
        return self.denoiser.dtype


def ldm_loss(batch: TrajectoryBatch, model: LatentDiffusion,
             rng: np.random.Generator) -> Tensor:
    """Masked epsilon-prediction loss on one draw of (n, noise) per sequence."""
    if len(batch) == 0:
        raise InputError("empty trajectory batch")
    dtype = model.dtype
    n = rng.integers(1, model.schedule.n_steps + 1, size=len(batch))
    noise = rng.standard_normal(batch.z0.shape)
    # known coordinates sit at their own noised ground truth, which is exactly
    # what the full forward draw already gives them
    z_n = q_sample(batch.z0, n, noise, model.schedule)
    weight = (~batch.mask).astype(dtype)[..., None]
    denom = float(weight.sum()) * batch.z0.shape[2]
    if denom == 0:
        warnings.warn("every position is known; nothing to learn", RuntimeWarning)
        return Tensor(np.zeros((), dtype=dtype))
    pred = model.denoiser(z_n.astype(dtype), n, batch.cond.astype(dtype))
    diff = pred - Tensor(noise.astype(dtype))
    return ops.tsum(diff * diff * Tensor(weight)) * (1.0 / denom)


def latent_loss(z0: Tensor, mask: np.ndarray, cond: np.ndarray, model: LatentDiffusion,
                rng: np.random.Generator) -> Tensor:
    """The masked epsilon loss with a clean window that carries gradient.

    Used when the windows come straight out of the graph encoder, so the
    diffusion objective also trains the encoder.
    """
    mask = np.asarray(mask, dtype=bool)
    if z0.ndim != 3 or mask.shape != z0.shape[:2]:
        raise InputError("latent window and mask shapes disagree")
    dtype = model.dtype
    n = rng.integers(1, model.schedule.n_steps + 1, size=z0.shape[0])
    noise = rng.standard_normal(z0.shape)
    ab = model.schedule.alpha_bar[n][:, None, None]
    z_n = z0 * Tensor(np.sqrt(ab).astype(dtype)) + Tensor((np.sqrt(1.0 - ab) * noise).astype(dtype))
    weight = (~mask).astype(dtype)[..., None]
    denom = float(weight.sum()) * z0.shape[2]
    if denom == 0:
        warnings.warn("every position is known; nothing to learn", RuntimeWarning)
        return Tensor(np.zeros((), dtype=dtype))
    diff = model.denoiser(z_n, n, np.asarray(cond).astype(dtype)) - Tensor(noise.astype(dtype))
    return ops.tsum(diff * diff * Tensor(weight)) * (1.0 / denom)


def train_step(batch: TrajectoryBatch, model: LatentDiffusion, rng: np.random.Generator,
               opt: Adam) -> float:
    loss = ldm_loss(batch, model, rng)
    opt.zero_grad()
    if loss.requires_grad:
        loss.backward()
        opt.step()
    return loss.item()


def _reverse_mean(z, eps, n: int, schedule: NoiseSchedule, x0_clip: float | None):
    """Posterior mean of z_{n-1} given z_n and the noise estimate.

    Written through the clean-sequence estimate so that it can be clipped: at
    the last cosine step 1/sqrt(alpha) is about 30 and would otherwise amplify
    any noise-prediction error by as much.
    """
    ab, ab_prev = schedule.alpha_bar[n], schedule.alpha_bar[n - 1]
    x0 = (z - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
    if x0_clip is not None:
        x0 = np.clip(x0, -x0_clip, x0_clip)
    return (math.sqrt(ab_prev) * schedule.betas[n] / (1.0 - ab)) * x0 \
        + (math.sqrt(schedule.alphas[n]) * (1.0 - ab_prev) / (1.0 - ab)) * z


def sample_inpaint(known: TrajectoryBatch, model: LatentDiffusion, rng: np.random.Generator,
                   resample_U: int = 1) -> np.ndarray:
    """Ancestral sampling with known coordinates re-imposed at every step.

    Returns [B, T, d]; known coordinates equal ``known.z0`` exactly.
    """
    x0 = known.z0.astype(np.float64)
    m = known.mask[..., None]
    if m.all():
        return known.z0.copy()
    sched = model.schedule
    var = sched.posterior_variance()
    z = rng.standard_normal(x0.shape)
    for n in range(sched.n_steps, 0, -1):
        for u in range(resample_U):
            eps = model.eps(z, n, known.cond).astype(np.float64)
            mean = _reverse_mean(z, eps, n, sched, model.x0_clip)
            unknown = mean + math.sqrt(var[n]) * rng.standard_normal(x0.shape) if n > 1 else mean
            seen = q_sample(x0, n - 1, rng.standard_normal(x0.shape), sched)
            prev = np.where(m, seen, unknown)
            if u < resample_U - 1 and n > 1:
                z = math.sqrt(sched.alphas[n]) * prev \
                    + math.sqrt(sched.betas[n]) * rng.standard_normal(x0.shape)
        z = prev
    return np.where(m, known.z0, z.astype(known.z0.dtype))


def forecast_window(length: int, split: int, window: int) -> tuple[int, np.ndarray]:
    """Start index of the evaluation window around ``split`` and its known mask."""
    if not 0 < split < length - 1:
        raise InputError(f"split must satisfy 0 < split < {length - 1}")
    if length < window:
        raise InputError(f"sequence of length {length} is shorter than the window {window}")
    start = int(np.clip(split - window // 2 + 1, 0, length - window))
    mask = np.arange(start, start + window) <= split
    return start, mask


def bound_terms(x0: np.ndarray, mask: np.ndarray, cond: np.ndarray, model: LatentDiffusion,
                rng: np.random.Generator) -> float:
    """One Monte-Carlo draw of the negative variational bound on the unknown coordinates.

    ``x0`` is one window [T, d]; every diffusion step is evaluated in one batch.
    Returns the bound in nats (summed over unknown coordinates).
    """
    sched = model.schedule
    n_steps = sched.n_steps
    unknown = (~mask).astype(np.float64)[None, :, None]
    n_unknown = float(unknown.sum()) * x0.shape[1]
    steps = np.arange(1, n_steps + 1)
    noise = rng.standard_normal((n_steps,) + x0.shape)
    z = q_sample(np.broadcast_to(x0, noise.shape).astype(np.float64), steps, noise, sched)
    eps = model.eps(z, steps, np.broadcast_to(cond, (n_steps, cond.shape[-1]))).astype(
        np.float64)
    err = ((eps - noise) ** 2 * unknown).sum(axis=(1, 2))          # [N]
    beta, alpha, ab = sched.betas[1:], sched.alphas[1:], sched.alpha_bar[1:]
    var = sched.posterior_variance()[1:]
    coef = beta ** 2 / (2.0 * var * alpha * (1.0 - ab))
    kl = coef[1:] * err[1:]                                         # steps 2..N
    decoder = 0.5 * math.log(2 * math.pi * beta[0]) * n_unknown + err[0] / (2.0 * alpha[0])
    ab_n = sched.alpha_bar[-1]
    x_u = x0[~mask]
    prior = 0.5 * float(np.sum(ab_n * x_u ** 2 + (1.0 - ab_n) - 1.0 - math.log(1.0 - ab_n)))
    return prior + float(kl.sum()) + decoder


def forecast_loglik(model: LatentDiffusion, sequence: np.ndarray, cond: np.ndarray,
                    split: int, window: int = 16, draws: int = 8, seed: int = 0,
                    target: np.ndarray | None = None) -> float:
    """Bound on log P(future | past) per unknown coordinate, in nats (higher is better).

    ``sequence`` is one normalised latent sequence [L, d]. The past comes from
    ``sequence``; the future scored is ``target`` when given (same shape),
    otherwise ``sequence`` itself.
    """
    sequence = np.asarray(sequence, dtype=np.float64)
    start, mask = forecast_window(len(sequence), split, window)
    x0 = sequence[start:start + window].copy()
    if target is not None:
        x0[~mask] = np.asarray(target, dtype=np.float64)[start:start + window][~mask]
    rng = np.random.default_rng([seed, split, 29])
    dims = float((~mask).sum()) * x0.shape[1]
    nll = np.mean([bound_terms(x0, mask, np.asarray(cond), model, rng) for _ in range(draws)])
    return -float(nll) / dims


@dataclass
class LdmTrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    p_unconditional: float = 0.1
    log_every: int = 200


def random_prefix_masks(rng: np.random.Generator, batch: int, window: int,
                        p_unconditional: float = 0.0) -> np.ndarray:
    """Known prefix of random length 1..window-1; occasionally nothing known."""
    k = rng.integers(1, window, size=batch)
    k[rng.random(batch) < p_unconditional] = 0
    return np.arange(window)[None, :] < k[:, None]


def train_ldm(windows: np.ndarray, cond: np.ndarray, model: LatentDiffusion,
              cfg: LdmTrainConfig, seed: int, opt: Adam | None = None,
              masks: np.ndarray | None = None) -> list[float]:
    """Fit on fixed windows [M, T, d]; masks are redrawn per step unless given."""
    if len(windows) == 0:
        raise InputError("no training windows")
    rng = np.random.default_rng([seed, 31])
    opt = opt or Adam(model.denoiser.parameters(), cfg.lr, max_grad_norm=1.0)
    window = windows.shape[1]
    losses = []
    for step in range(cfg.steps):
        idx = np.sort(rng.choice(len(windows), size=min(cfg.batch_size, len(windows)),
                                 replace=False))
        mask = masks[idx] if masks is not None else \
            random_prefix_masks(rng, len(idx), window, cfg.p_unconditional)
        batch = TrajectoryBatch(windows[idx], mask, cond[idx])
        losses.append(train_step(batch, model, rng, opt))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("ldm step %d loss %.5f", step, losses[-1])
    return losses

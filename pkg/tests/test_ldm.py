import math

import numpy as np
import pytest

from graphbid.auction import AgentProfile
from graphbid.errors import ConfigurationError, InputError
from graphbid.ldm import (
    Denoiser,
    EpisodeLatents,
    LatentDiffusion,
    LatentNorm,
    LdmTrainConfig,
    NoiseSchedule,
    TrajectoryBatch,
    build_windows,
    condition_vector,
    forecast_loglik,
    forecast_window,
    ldm_loss,
    load_latents,
    q_sample,
    random_prefix_masks,
    sample_inpaint,
    save_latents,
    sliding_windows,
    train_ldm,
)
from graphbid.numkit import Tensor, grad_check, precision

SCHED = NoiseSchedule.cosine(100)


def _model(dim=3, cond=2, channels=8, blocks=1, steps=20, seed=0):
    return LatentDiffusion(Denoiser(np.random.default_rng(seed), dim, cond, channels=channels,
                                    blocks=blocks, kernel=3, emb_dim=8),
                           NoiseSchedule.cosine(steps))


def test_schedule_monotone_and_positive():
    ab = SCHED.alpha_bar
    assert ab[0] == 1.0 and (np.diff(ab) < 0).all() and (ab > 0).all()
    assert (SCHED.posterior_variance()[1:] > 0).all()


def test_q_sample_examples():
    rng = np.random.default_rng(0)
    z0 = rng.normal(size=(4, 3))
    np.testing.assert_allclose(q_sample(z0, 0, rng.normal(size=z0.shape), SCHED), z0)
    n = 37
    np.testing.assert_array_equal(q_sample(z0, n, np.zeros_like(z0), SCHED),
                                  math.sqrt(SCHED.alpha_bar[n]) * z0)
    with pytest.raises(InputError):
        q_sample(z0, 101, np.zeros_like(z0), SCHED)
    with pytest.raises(InputError):
        q_sample(z0, -1, np.zeros_like(z0), SCHED)


def test_terminal_variance_is_unit():
    rng = np.random.default_rng(1)
    z0 = np.full(10_000, 2.0)
    var = q_sample(z0, 100, rng.standard_normal(10_000), SCHED).var()
    assert abs(var - 1.0) < 0.05


def test_per_row_steps():
    z0 = np.ones((2, 4, 3))
    out = q_sample(z0, np.array([0, 100]), np.zeros_like(z0), SCHED)
    np.testing.assert_allclose(out[0], 1.0)
    np.testing.assert_allclose(out[1], math.sqrt(SCHED.alpha_bar[100]))


class _Oracle:
    """Stands in for the denoiser: true noise, or garbage where ``junk`` is set."""
    dtype = np.float64

    def __init__(self, z0, schedule, junk=None):
        self.z0, self.schedule, self.junk = z0, schedule, junk

    def __call__(self, z, n, cond):
        ab = self.schedule.alpha_bar[n][:, None, None]
        eps = (np.asarray(z) - np.sqrt(ab) * self.z0) / np.sqrt(1 - ab)
        if self.junk is not None:
            eps = np.where(self.junk[..., None], 123.0, eps)
        return Tensor(eps)


def test_loss_zero_for_exact_noise():
    rng = np.random.default_rng(2)
    z0 = rng.normal(size=(3, 5, 2))
    model = LatentDiffusion(_Oracle(z0, SCHED), SCHED)
    batch = TrajectoryBatch(z0, np.zeros((3, 5), bool), np.zeros((3, 1)))
    assert ldm_loss(batch, model, rng).item() == pytest.approx(0.0, abs=1e-10)


def test_loss_ignores_known_positions():
    rng = np.random.default_rng(3)
    z0 = rng.normal(size=(2, 6, 3))
    mask = np.zeros((2, 6), bool)
    mask[:, :3] = True
    model = LatentDiffusion(_Oracle(z0, SCHED, junk=mask), SCHED)
    assert ldm_loss(TrajectoryBatch(z0, mask, np.zeros((2, 1))), model,
                    rng).item() == pytest.approx(0.0, abs=1e-10)
    full = ldm_loss(TrajectoryBatch(z0, np.zeros((2, 6), bool), np.zeros((2, 1))), model, rng)
    assert full.item() == pytest.approx(123.0 ** 2 / 2, rel=0.2)


def test_all_known_mask_warns_and_returns_zero():
    model = _model()
    batch = TrajectoryBatch(np.zeros((2, 4, 3)), np.ones((2, 4), bool), np.zeros((2, 2)))
    with pytest.warns(RuntimeWarning):
        assert ldm_loss(batch, model, np.random.default_rng(0)).item() == 0.0


def test_empty_batch_rejected():
    with pytest.raises(InputError):
        ldm_loss(TrajectoryBatch(np.zeros((0, 4, 3)), np.zeros((0, 4)), np.zeros((0, 2))),
                 _model(), np.random.default_rng(0))


def test_denoiser_shapes_and_errors():
    model = _model()
    out = model.denoiser(np.zeros((2, 7, 3)), np.array([1, 5]), np.zeros((2, 2)))
    assert out.shape == (2, 7, 3)
    with pytest.raises(ConfigurationError):
        model.denoiser(np.zeros((2, 7, 4)), np.array([1, 5]), np.zeros((2, 2)))
    with pytest.raises(ConfigurationError):
        Denoiser(np.random.default_rng(0), 3, 2, kernel=4)


def test_loss_gradient_finite_difference():
    with precision(np.float64):
        model = _model(seed=4)
        rng = np.random.default_rng(5)
        batch = TrajectoryBatch(rng.normal(size=(2, 5, 3)), random_prefix_masks(rng, 2, 5),
                                rng.normal(size=(2, 2)))
        layer = model.denoiser.blocks[0].conv1
        original = layer.weight

        def f(w):
            layer.weight = w
            try:
                return ldm_loss(batch, model, np.random.default_rng(6))
            finally:
                layer.weight = original

        assert grad_check(f, original.data) < 1e-4


def test_inpaint_keeps_known_bit_for_bit():
    rng = np.random.default_rng(7)
    model = _model(steps=10)
    z0 = rng.normal(size=(2, 6, 3)).astype(np.float32)
    mask = np.zeros((2, 6), bool)
    mask[:, :2] = True
    mask[1, 4] = True
    out = sample_inpaint(TrajectoryBatch(z0, mask, np.zeros((2, 2))), model, rng, resample_U=2)
    assert out.shape == z0.shape
    assert np.array_equal(out[mask], z0[mask])
    assert np.isfinite(out).all()


def test_inpaint_all_known_returns_conditioning():
    z0 = np.arange(12.0).reshape(1, 4, 3)
    out = sample_inpaint(TrajectoryBatch(z0, np.ones((1, 4), bool), np.zeros((1, 2))),
                         _model(), np.random.default_rng(0))
    np.testing.assert_array_equal(out, z0)


def test_inpaint_deterministic_given_seed():
    z0 = np.ones((1, 4, 3))
    mask = np.array([[True, False, False, False]])
    model = _model(steps=5)
    a = sample_inpaint(TrajectoryBatch(z0, mask, np.zeros((1, 2))), model,
                       np.random.default_rng(3))
    b = sample_inpaint(TrajectoryBatch(z0, mask, np.zeros((1, 2))), model,
                       np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)


def test_constant_sequences_are_reproduced():
    """Trained on one constant sequence, generated positions sit near the constant."""
    dim, win = 2, 6
    model = _model(dim=dim, cond=1, channels=16, blocks=2, steps=20, seed=1)
    data = np.full((16, win, dim), 0.8)
    losses = train_ldm(data, np.zeros((16, 1)), model,
                       LdmTrainConfig(steps=400, batch_size=16, lr=3e-3, log_every=0), seed=0)
    assert np.mean(losses[-20:]) < np.mean(losses[:20])
    known = TrajectoryBatch(data, random_prefix_masks(np.random.default_rng(0), 16, win),
                            np.zeros((16, 1)))
    out = sample_inpaint(known, model, np.random.default_rng(1))
    gen = out[~known.mask]
    assert gen.std() < 0.1
    assert abs(gen.mean() - 0.8) < 3 * gen.std()


def test_forecast_window_and_errors():
    start, mask = forecast_window(33, 10, 16)
    assert start == 3 and mask.sum() == 8 and not mask[8:].any()
    start, mask = forecast_window(33, 30, 16)
    assert start == 17 and mask.sum() == 14
    with pytest.raises(InputError):
        forecast_window(33, 0, 16)
    with pytest.raises(InputError):
        forecast_window(33, 32, 16)


def test_forecast_loglik_deterministic_and_finite():
    model = _model(steps=10)
    seq = np.random.default_rng(0).normal(size=(12, 3))
    a = forecast_loglik(model, seq, np.zeros(2), split=5, window=8, draws=2, seed=4)
    b = forecast_loglik(model, seq, np.zeros(2), split=5, window=8, draws=2, seed=4)
    assert a == b and math.isfinite(a)


def test_windows_norm_and_cache(tmp_path):
    rng = np.random.default_rng(0)
    eps = [EpisodeLatents(f"e{j}", j, rng.normal(size=(10, 2, 3)), rng.normal(size=(2, 5)))
           for j in range(2)]
    norm = LatentNorm.fit(np.concatenate([e.latents for e in eps]))
    z, c, ids = build_windows(eps, norm, window=4)
    assert z.shape == (2 * 2 * 7, 4, 3) and c.shape == (28, 5) and len(set(ids)) == 28
    np.testing.assert_allclose(norm.invert(norm.apply(eps[0].latents)), eps[0].latents)
    assert sliding_windows(np.zeros((3, 2)), 4).shape == (0, 4, 2)
    save_latents(tmp_path / "lat.ckpt", eps, {"k": 1})
    back, meta = load_latents(tmp_path / "lat.ckpt")
    assert meta["k"] == 1 and back[1].episode_id == "e1"
    np.testing.assert_allclose(back[1].latents, eps[1].latents, rtol=1e-6)


def test_condition_vector():
    v = condition_vector(AgentProfile(0, 2, 150.0), 4, 300.0)
    np.testing.assert_allclose(v, [0, 0, 1, 0, 0.5])


def test_unclipped_reverse_mean_equals_noise_form():
    from graphbid.ldm.diffusion import _reverse_mean
    rng = np.random.default_rng(8)
    z, eps = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    for n in (1, 17, 100):
        beta, alpha, ab = SCHED.betas[n], SCHED.alphas[n], SCHED.alpha_bar[n]
        expect = (z - beta / math.sqrt(1 - ab) * eps) / math.sqrt(alpha)
        np.testing.assert_allclose(_reverse_mean(z, eps, n, SCHED, None), expect, rtol=1e-9,
                                   atol=1e-9)


def separation_ratio(model, cond_a, cond_b, window, dim, draws, seed):
    """Distance between per-condition sample means over the pooled within-class std."""
    rng = np.random.default_rng(seed)
    known = np.zeros((draws, window, dim))
    mask = np.zeros((draws, window), bool)
    out = []
    for c in (cond_a, cond_b):
        gen = sample_inpaint(TrajectoryBatch(known, mask, np.repeat(c[None], draws, 0)), model,
                             rng)
        out.append(gen.reshape(draws, -1).mean(axis=1))
    within = math.sqrt((out[0].var() + out[1].var()) / 2)
    return abs(out[0].mean() - out[1].mean()) / within


def test_condition_classes_separate():
    dim, win = 2, 6
    model = _model(dim=dim, cond=2, channels=16, blocks=2, steps=20, seed=2)
    cond = np.repeat(np.eye(2), 16, axis=0)
    data = np.where(cond[:, :1, None] == 1, -1.0, 1.0) * np.ones((32, win, dim))
    train_ldm(data, cond, model, LdmTrainConfig(steps=400, batch_size=32, lr=3e-3,
                                                p_unconditional=1.0, log_every=0), seed=0)
    assert separation_ratio(model, np.eye(2)[0], np.eye(2)[1], win, dim, 16, seed=3) >= 5.0

import math

import numpy as np
import pytest

from graphbid.auction import AuctionConfig
from graphbid.bidders import BidderConfig, episode_seed, simulate_episode
from graphbid.errors import ConfigurationError, InputError
from graphbid.graph.build import context_dim
from graphbid.idm import (
    GraphModels,
    GraphTrainConfig,
    IdmBatch,
    IdmModel,
    assemble_batch,
    bid_accuracy,
    episode_transitions,
    graph_loss,
    idm_predict,
    train_graph_models,
)
from graphbid.numkit import Adam, Tensor, grad_check, precision

D, NC = 8, 4


def _random_batch(rng, n, dim=D):
    return IdmBatch(x_t=rng.normal(size=(n, dim)), x_next=rng.normal(size=(n, dim)),
                    f=rng.normal(size=(n, dim + 2)), c=rng.normal(size=(n, context_dim(NC))),
                    target=rng.uniform(0, 2, size=n))


def test_zero_init_predicts_ln2():
    rng = np.random.default_rng(0)
    model = IdmModel(rng, D, NC, hidden=16, zero_last=True)
    b = _random_batch(rng, 5)
    np.testing.assert_allclose(idm_predict(b.x_t, b.x_next, b.f, b.c, model), math.log(2),
                               rtol=1e-6)


def test_predictions_nonnegative():
    rng = np.random.default_rng(1)
    model = IdmModel(rng, D, NC, hidden=16)
    b = _random_batch(rng, 1000)
    b.x_t = b.x_t * 50
    assert (idm_predict(b.x_t, b.x_next, b.f, b.c, model) >= 0).all()


def test_single_tuple_returns_float():
    rng = np.random.default_rng(1)
    model = IdmModel(rng, D, NC, hidden=16)
    b = _random_batch(rng, 1)
    assert isinstance(idm_predict(b.x_t[0], b.x_next[0], b.f[0], b.c[0], model), float)


def test_dimension_mismatch_and_bad_inputs():
    rng = np.random.default_rng(2)
    model = IdmModel(rng, D, NC, hidden=16)
    b = _random_batch(rng, 3, dim=D + 1)
    with pytest.raises(ConfigurationError):
        model(b.x_t, b.x_next, b.f, b.c)
    b = _random_batch(rng, 3)
    b.x_t[0, 0] = np.nan
    with pytest.raises(InputError):
        idm_predict(b.x_t, b.x_next, b.f, b.c, model)


def _constant_model(p):
    model = IdmModel(np.random.default_rng(0), D, NC, hidden=4, zero_last=True)
    model.net.layers[-1].bias.data[:] = math.log(math.expm1(p))  # softplus^-1
    return model


def test_loss_zero_when_exact_and_closed_form():
    rng = np.random.default_rng(3)
    b = _random_batch(rng, 2)
    with precision(np.float64):
        model = _constant_model(1.5)
        b.target = np.array([1.5, 1.5])
        assert graph_loss(b, model).item() == pytest.approx(0.0, abs=1e-12)
        b.target = np.array([0.0, 2.0])
        p = 1.5
        assert graph_loss(b, model).item() == pytest.approx((p ** 2 + (p - 2) ** 2) / 2)


def test_empty_batch_rejected():
    model = IdmModel(np.random.default_rng(0), D, NC, hidden=4)
    b = _random_batch(np.random.default_rng(0), 0)
    with pytest.raises(InputError):
        graph_loss(b, model)


def test_graph_loss_finite_difference():
    rng = np.random.default_rng(4)
    with precision(np.float64):
        model = IdmModel(rng, D, NC, hidden=6)
        b = _random_batch(rng, 7)
        layer = model.net.layers[0]
        original = layer.weight

        def f(w):
            layer.weight = w
            try:
                return graph_loss(b, model)
            finally:
                layer.weight = original

        assert grad_check(f, original.data) < 1e-4

        def g(x):
            return graph_loss(IdmBatch(x, b.x_next, b.f, b.c, b.target), model)

        assert grad_check(g, b.x_t) < 1e-4


@pytest.fixture(scope="module")
def small_transitions():
    cfg = AuctionConfig(fixed_categories=True, horizon=8)
    bc = BidderConfig(fixed_alphas=(0.5, 0.8, 1.1, 1.4))
    eps = [simulate_episode(cfg, bc, episode_seed(5, i)) for i in range(4)]
    return [tr for e in eps for tr in episode_transitions(e, cap_m=16)]


def test_transition_targets_are_scaled_values(small_transitions):
    alphas = np.array([0.5, 0.8, 1.1, 1.4])
    for tr in small_transitions:
        np.testing.assert_allclose(tr.target, alphas[tr.agent] * tr.value, rtol=1e-12)


def test_gradient_reaches_gnn(small_transitions):
    models = GraphModels.create(0, dim=D, ec=True, heads=2)
    batch, _, _ = assemble_batch(small_transitions[:3], models)
    graph_loss(batch, models.idm).backward()
    for module in (models.encoder, models.ec):
        norm = math.sqrt(sum(float((p.grad ** 2).sum()) for p in module.parameters()
                             if p.grad is not None))
        assert norm > 0


def test_spl_training_runs_and_updates_ema(small_transitions):
    models = GraphModels.create(1, dim=D, spl=True)
    before = models.ema.model.hub_in.weight.data.copy()
    out = train_graph_models(small_transitions, models,
                             GraphTrainConfig(steps=3, batch_size=4, log_every=0), seed=0)
    assert len(out.spl) == 3 and np.isfinite(out.losses).all()
    assert not np.array_equal(before, models.ema.model.hub_in.weight.data)


def test_overfit_fixed_batch_monotone():
    rng = np.random.default_rng(6)
    model = IdmModel(rng, D, NC)
    b = _random_batch(rng, 256)
    b.target = np.abs(b.f[:, -1]) * (1.0 + 0.3 * b.c[:, 0].clip(-1, 1))
    opt = Adam(model.parameters(), lr=3e-4)
    losses = []
    for _ in range(200):
        loss = graph_loss(b, model)
        losses.append(loss.item())
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert all(b_ <= a + 1e-7 for a, b_ in zip(losses, losses[1:]))
    assert losses[-1] < 0.1 * losses[0]


def test_bid_accuracy_direct_sum_oracle():
    rng = np.random.default_rng(7)
    rows = []
    for _ in range(40):
        n = int(rng.integers(1, 5))
        rows.append((int(rng.integers(3)), rng.uniform(0, 3, n), rng.uniform(0, 3, n)))
    got = bid_accuracy(rows)
    for agent in range(3):
        mine = [(p, t) for a, p, t in rows if a == agent]
        expect = sum(math.sqrt(sum((x - y) ** 2 for x, y in zip(p, t))) for p, t in mine)
        assert got[agent] == expect / len(mine)


def test_bid_accuracy_closed_forms():
    assert bid_accuracy([(0, np.array([1.0, 2.0]), np.array([1.0, 2.0]))]) == {0: 0.0}
    assert bid_accuracy([(0, np.array([3.0]), np.array([0.0]))]) == {0: 3.0}


def test_tensor_inputs_accepted():
    rng = np.random.default_rng(8)
    model = IdmModel(rng, D, NC, hidden=4)
    b = _random_batch(rng, 3)
    out = model(Tensor(b.x_t), b.x_next, b.f, b.c)
    assert out.shape == (3,)

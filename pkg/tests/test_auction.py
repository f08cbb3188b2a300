import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphbid.auction import (
    AgentProfile,
    AuctionConfig,
    AuctionEnv,
    ImpressionOpportunity,
    allocate_and_price,
    compute_kpis,
    custom_state,
    generate_ios,
    replay,
    run_episode,
    step,
)
from graphbid.auction.kpi import cpa, roi
from graphbid.auction.storage import check_disjoint, read_manifest
from graphbid.bidders import BidderConfig, ScalingPolicy, UniformScaler, generate_dataset
from graphbid.errors import ConfigurationError, InputError

from oracles import ledger, oracle_prices


# -- mechanism ------------------------------------------------------------------
def test_fpa_single_slot():
    assert allocate_and_price({0: 5.0, 1: 3.0}, 1, "FPA") == [(0, 5.0)]


def test_gsp_two_slots():
    assert allocate_and_price({0: 5.0, 1: 3.0, 2: 2.0}, 2, "GSP") == [(0, 3.0), (1, 2.0)]


def test_vcg_two_slots():
    assert allocate_and_price({0: 5.0, 1: 3.0, 2: 2.0}, 2, "VCG") == [(0, 2.0), (1, 2.0)]
    assert oracle_prices({0: 5.0, 1: 3.0, 2: 2.0}, 2, "VCG") == {0: 2.0, 1: 2.0}


def test_ties_go_to_lower_id():
    assert allocate_and_price({3: 2.0, 1: 2.0, 2: 2.0}, 2, "GSP") == [(1, 2.0), (2, 2.0)]


def test_zero_bids_never_win():
    assert allocate_and_price({0: 0.0, 1: 0.0}, 2, "FPA") == []
    assert allocate_and_price({0: 0.0, 1: 1.0}, 2, "GSP") == [(1, 0.0)]


def test_negative_bid_rejected():
    with pytest.raises(InputError):
        allocate_and_price({0: -1.0}, 1, "FPA")
    with pytest.raises(InputError):
        allocate_and_price({0: 1.0}, 1, "SPA")


@pytest.mark.parametrize("rule", ["FPA", "GSP", "VCG"])
def test_mechanism_matches_oracle_small_exhaustive(rule):
    grid = [0.0, 1.0, 2.5]
    for n in range(1, 5):
        for profile in itertools.product(grid, repeat=n):
            bids = dict(enumerate(profile))
            for slots in (1, 2, 3):
                got = dict(allocate_and_price(bids, slots, rule))
                assert got == oracle_prices(bids, slots, rule)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=6),
       st.integers(1, 3), st.sampled_from(["FPA", "GSP", "VCG"]))
def test_price_never_exceeds_bid(profile, slots, rule):
    bids = dict(enumerate(profile))
    result = allocate_and_price(bids, slots, rule)
    assert len(result) <= slots
    for agent, price in result:
        assert 0 <= price <= bids[agent]
        if rule == "FPA":
            assert price == bids[agent]


# -- IO generation ------------------------------------------------------------------
def test_zero_arrival_rate_is_empty():
    stream = generate_ios(AuctionConfig(arrival_rate=0.0, horizon=10), seed=3)
    assert all(step == [] for step in stream)


def test_generation_deterministic():
    cfg = AuctionConfig()
    a, b = generate_ios(cfg, 42), generate_ios(cfg, 42)
    assert [[io.to_json() for io in s] for s in a] == [[io.to_json() for io in s] for s in b]


def test_arrival_rate_law_of_large_numbers():
    stream = generate_ios(AuctionConfig(arrival_rate=5.0, horizon=100), seed=0)
    mean = np.mean([len(s) for s in stream])
    assert abs(mean - 5.0) < 3 * math.sqrt(5.0 / 100)


def test_ios_well_formed():
    cfg = AuctionConfig(horizon=20, max_slots=3)
    for s in generate_ios(cfg, 9):
        for io in s:
            assert 0 <= io.t_start <= io.t_end < cfg.horizon
            assert 1 <= io.slots <= len(io.exposure)
            assert set(io.value) == set(io.exposure)
            assert all(v >= 0 for v in io.value.values())


def test_invalid_config_rejected():
    with pytest.raises(ConfigurationError):
        AuctionConfig(arrival_rate=-1)
    with pytest.raises(ConfigurationError):
        AuctionConfig(exposure_prob=0.0)
    with pytest.raises(ConfigurationError):
        AuctionConfig.from_dict({"n_agents": 2, "colour": "red"})


# -- stepping ------------------------------------------------------------------
def _io(id, exposure, values, slots=1, t0=0, t1=0, topic=0):
    return ImpressionOpportunity(id, t0, t1, slots, topic, tuple(exposure),
                                 dict(zip(exposure, values)))


def _agents(budgets):
    return [AgentProfile(i, 0, b) for i, b in enumerate(budgets)]


def test_all_zero_bids():
    state = custom_state(_agents([10, 10]), [_io(0, [0, 1], [1.0, 2.0])], horizon=1)
    nxt, out = step(state, np.zeros((2, 1)), hard_budget=False)
    assert out.cost == [0.0, 0.0] and out.value == [0.0, 0.0] and out.winners == [[]]
    assert nxt.t == 1 and nxt.done


def test_hard_budget_suppresses_bid():
    state = custom_state(_agents([1.0]), [_io(0, [0], [3.0])], horizon=1)
    _, out = step(state, np.array([[5.0]]), hard_budget=True)
    assert out.winners == [[]] and out.cost == [0.0] and out.bids_submitted == [0]
    _, out = step(state, np.array([[5.0]]), hard_budget=False)
    assert out.winners == [[0]] and out.cost == [5.0]


def test_scripted_fpa_ledger():
    ios = [_io(0, [0, 1], [2.0, 1.0]), _io(1, [0, 1], [1.0, 3.0]), _io(2, [0], [4.0])]
    state = custom_state(_agents([100, 100]), ios, horizon=1)
    bids = np.array([[1.5, 0.5, 2.0], [1.0, 2.5, 0.0]])
    _, out = step(state, bids, hard_budget=False)
    # agent 0 wins IO0 (1.5) and IO2 (2.0); agent 1 wins IO1 (2.5)
    assert out.cost == [3.5, 2.5]
    assert out.value == [6.0, 3.0]
    assert out.wins == [2, 1] and out.bids_submitted == [3, 2]


def test_bid_on_unexposed_io_rejected():
    state = custom_state(_agents([10, 10]), [_io(0, [0], [1.0])], horizon=1)
    with pytest.raises(InputError):
        step(state, np.array([[1.0], [1.0]]), hard_budget=False)
    with pytest.raises(InputError):
        step(state, np.array([[-1.0], [0.0]]), hard_budget=False)


def test_stochastic_conversions_are_whole_numbers():
    ios = [_io(k, [0], [1.6]) for k in range(200)]
    state = custom_state(_agents([1e9]), ios, horizon=1, stochastic_conversions=True, seed=1)
    _, out = step(state, np.ones((1, 200)), hard_budget=False)
    assert out.value[0] == int(out.value[0])
    assert abs(out.value[0] / 200 - 1.6) < 0.15


def test_multi_step_lifecycle_auctions_each_live_step():
    ios = [_io(0, [0, 1], [1.0, 1.0], t0=0, t1=2)]
    state = custom_state(_agents([100, 100]), ios, horizon=3)
    total = 0
    while not state.done:
        state, out = step(state, np.array([[1.0], [0.5]]), hard_budget=False)
        total += out.wins[0]
    assert total == 3


def _uniform_policy(alpha):
    return ScalingPolicy([UniformScaler(alpha)] * 4)


def test_episode_cumulative_cost_matches_steps():
    rec = run_episode(AuctionConfig(), _uniform_policy(0.8), seed=5)
    assert rec.cumulative_cost() == pytest.approx([sum(o.cost[i] for o in rec.outcomes)
                                                   for i in range(4)])


def test_episode_determinism():
    a = run_episode(AuctionConfig(), _uniform_policy(0.8), seed=11).dumps()
    b = run_episode(AuctionConfig(), _uniform_policy(0.8), seed=11).dumps()
    assert a == b


def test_replay_reproduces_outcomes():
    cfg = AuctionConfig(rule="GSP", stochastic_conversions=False)
    rec = run_episode(cfg, _uniform_policy(1.2), seed=2)
    for (_, _, out), stored in zip(replay(rec), rec.outcomes):
        assert out == stored


@pytest.mark.parametrize("rule", ["FPA", "GSP", "VCG"])
def test_hard_budget_never_overspends(rule):
    cfg = AuctionConfig(rule=rule, hard_budget=True, budget_low=5, budget_high=10)
    for seed in range(8):
        rec = run_episode(cfg, _uniform_policy(1.5), seed=seed)
        for agent, cost in zip(rec.agents, rec.cumulative_cost()):
            assert cost <= agent.budget


# -- KPIs ------------------------------------------------------------------
def test_kpi_formulas():
    assert cpa(10, 10) == 1.0 and roi(10, 10) == 0.0
    assert cpa(5, 0) == math.inf and cpa(0, 0) == 0.0 and roi(0, 3) == 0.0


def test_kpis_scripted_episode():
    ios = [_io(0, [0, 1], [2.0, 1.0]), _io(1, [0, 1], [1.0, 3.0]), _io(2, [0], [4.0])]
    env = AuctionEnv(AuctionConfig(n_agents=2), seed=0)
    env.state = custom_state(_agents([3.0, 100.0]), ios, horizon=1)
    env.record.agents = env.state.agents
    env.step([[1.5, 0.5, 2.0], [1.0, 2.5, 0.0]])
    report = compute_kpis(env.record)
    a0, a1 = report.per_agent
    assert (a0.ret, a0.cost, a0.cpa) == (6.0, 3.5, 3.5 / 6.0)
    assert a0.win_rate == pytest.approx(2 / 3) and a0.budget_adherence == 0.0
    assert (a1.ret, a1.roi, a1.win_rate, a1.budget_adherence) == (3.0, (3.0 - 2.5) / 2.5, 0.5, 1.0)
    assert report.aggregate.social_welfare == 9.0 == a0.ret + a1.ret
    assert report.aggregate.budget_adherence == 0.5


def test_win_rate_and_adherence_arithmetic():
    ios = [_io(k, [0, 1], [1.0, 1.0]) for k in range(10)]
    env = AuctionEnv(AuctionConfig(n_agents=2), seed=0)
    env.state = custom_state(_agents([100.0, 100.0]), ios, horizon=1)
    env.record.agents = env.state.agents
    row0 = [2.0 if k < 3 else 0.5 for k in range(10)]
    env.step([row0, [1.0] * 10])
    assert compute_kpis(env.record).per_agent[0].win_rate == 0.3


def test_dataset_generation_and_manifest(tmp_path):
    manifest = generate_dataset(AuctionConfig(horizon=4), 0, seed=1, out_dir=tmp_path / "empty")
    assert manifest["record_count"] == 0 and manifest["shards"] == []
    assert not list((tmp_path / "empty").glob("*.jsonl"))
    m1 = generate_dataset(AuctionConfig(horizon=4), 5, seed=1, out_dir=tmp_path / "a",
                          shard_size=2)
    generate_dataset(AuctionConfig(horizon=4), 5, seed=1, out_dir=tmp_path / "b", shard_size=2)
    assert m1["record_count"] == 5 and len(m1["shards"]) == 3
    for shard in m1["shards"]:
        assert (tmp_path / "a" / shard["file"]).read_bytes() == \
            (tmp_path / "b" / shard["file"]).read_bytes()
    assert read_manifest(tmp_path / "a") == read_manifest(tmp_path / "b")
    m2 = generate_dataset(AuctionConfig(horizon=4), 5, seed=2, out_dir=tmp_path / "c")
    check_disjoint({e for s in m1["shards"] for e in s["episodes"]}, m2)
    with pytest.raises(InputError):
        check_disjoint({e for s in m1["shards"] for e in s["episodes"]}, m1)


def test_dataset_bids_nonnegative_and_replayable(tmp_path):
    from graphbid.auction.storage import load_episodes
    generate_dataset(AuctionConfig(horizon=6), 6, seed=3, out_dir=tmp_path)
    for rec in load_episodes(tmp_path):
        assert all(b >= 0 and math.isfinite(b) for step_ in rec.bids for row in step_
                   for b in row)
        for (_, _, out), stored in zip(replay(rec), rec.outcomes):
            assert out == stored


def test_kpi_ledger_oracle_agreement():
    rng = np.random.default_rng(0)
    for trial in range(5):
        ios = [_io(k, [0, 1, 2], list(rng.integers(1, 5, 3).astype(float)),
                   slots=int(rng.integers(1, 3))) for k in range(6)]
        bids = rng.integers(0, 4, size=(3, 6)).astype(float)
        rule = ["FPA", "GSP", "VCG"][trial % 3]
        state = custom_state(_agents([6.0, 6.0, 6.0]), ios, horizon=1, rule=rule)
        _, out = step(state, bids, hard_budget=True)
        cost, value, wins, nb = ledger([(io.slots, io.value) for io in ios],
                                       [{a: bids[a, k] for a in range(3)} for k in range(6)],
                                       3, rule, budgets=[6.0] * 3)
        assert out.cost == cost and out.value == value
        assert out.wins == wins and out.bids_submitted == nb


def test_fixed_alpha_policy_is_exact():
    cfg = AuctionConfig(fixed_categories=True)
    from graphbid.bidders import simulate_episode
    rec = simulate_episode(cfg, BidderConfig(fixed_alphas=(0.5, 0.8, 1.1, 1.4)), seed=4)
    assert [a.category for a in rec.agents] == [0, 1, 2, 3]
    for t, out in enumerate(rec.outcomes):
        live = [io for io in rec.ios if io.live_at(t)]
        for k, io in enumerate(live):
            for a in io.exposure:
                assert rec.bids[t][a][k] == pytest.approx((0.5, 0.8, 1.1, 1.4)[a] * io.value[a])

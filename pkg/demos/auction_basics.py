"""
Auctions, bidders and KPIs
==========================

A tour of the simulator: one auction cleared under three pricing rules, a
simulated episode with its KPIs, and a sweep over the uniform bid-scaling
factor that the planner is later compared against.

    python demos/auction_basics.py
"""
import numpy as np

from graphbid.auction import AuctionConfig, allocate_and_price, compute_kpis, run_episode
from graphbid.bidders import BidderConfig, ScalingPolicy, UniformScaler, episode_seed, \
    sample_scalers, simulate_episode

# One impression, two ad slots, three bids. First-price winners pay their bid,
# GSP winners pay the next bid down, VCG winners pay the welfare they displace.
bids = {0: 5.0, 1: 3.0, 2: 2.0}
for rule in ("FPA", "GSP", "VCG"):
    print(f"{rule}: {allocate_and_price(bids, slots=2, rule=rule)}")

# A whole episode: 4 advertisers, 32 steps, each bidding a scaled version of
# its private value for every impression it is shown.
cfg = AuctionConfig(hard_budget=True)
record = simulate_episode(cfg, BidderConfig(), seed=episode_seed(7, 0))
report = compute_kpis(record)
print("\nagent  budget   spend  return    cpa    roi  win rate")
for a in report.per_agent:
    print(f"{a.agent:5d} {a.budget:7.1f} {a.cost:7.1f} {a.ret:7.1f} {a.cpa:6.2f} "
          f"{a.roi:6.2f} {a.win_rate:9.2f}")
print(f"social welfare {report.aggregate.social_welfare:.1f}, "
      f"budget adherence {report.aggregate.budget_adherence:.2f}")

# How good is a fixed scaling factor? Agent 0 bids alpha * value while the
# others draw their own factors; the return curve is flat near its peak, which
# is why the baseline used in the end-to-end evaluation is hard to beat.
seeds = [episode_seed(800, i) for i in range(32)]
opponents = BidderConfig(p_uniform=1.0)
print("\nalpha  mean return  spend/budget")
for alpha in (0.4, 0.67, 0.8, 1.0, 1.5):
    rets, used = [], []
    for s in seeds:
        policy = ScalingPolicy(sample_scalers(cfg, opponents, s))
        policy.scalers[0] = UniformScaler(alpha)
        k = compute_kpis(run_episode(cfg, policy, s), agents=[0]).per_agent[0]
        rets.append(k.ret)
        used.append(k.cost / k.budget)
    print(f"{alpha:5.2f} {np.mean(rets):12.1f} {np.mean(used):13.2f}")

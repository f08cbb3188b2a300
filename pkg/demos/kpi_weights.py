"""
Choosing what the planner optimises
===================================

The planner ranks sampled futures by a weighted sum of standardised KPIs
predicted by the value head. The bundled toy config plans for return alone;
the library default mixes in CPA, ROI, win rate and welfare. This script
re-uses a finished run directory (see toy_pipeline.py) and compares the two at
acting time on development seeds, which are kept apart from the evaluation
seeds used for reporting. The value head and RAFT stage of the run are left as
they were trained.

    python demos/kpi_weights.py runs/toy [n_seeds]
"""
import copy
import sys

import numpy as np

from graphbid.auction import compute_kpis
from graphbid.harness.config import AlignSection, toy_config
from graphbid.harness.stages import Run, eval_policies

out = sys.argv[1] if len(sys.argv) > 1 else "runs/toy"
n_seeds = int(sys.argv[2]) if len(sys.argv) > 2 else 16


def returns(records, agent):
    return np.array([compute_kpis(r, agents=[agent]).per_agent[0].ret for r in records])


defaults = AlignSection()
variants = {
    "all KPIs": {k: getattr(defaults, k) for k in ("w_return", "w_cpa", "w_roi", "w_win_rate",
                                                    "w_social_welfare")},
    "return only": {"w_return": 1.0, "w_cpa": 0.0, "w_roi": 0.0, "w_win_rate": 0.0,
                    "w_social_welfare": 0.0},
}
for label, weights in variants.items():
    cfg = copy.deepcopy(toy_config())
    cfg.eval.seed_base, cfg.eval.seeds = 800, n_seeds
    for key, value in weights.items():
        setattr(cfg.align, key, value)
    acted, base, _ = eval_policies(Run(cfg, 0, out))
    agent = cfg.eval.controlled_agent
    diff = returns(acted, agent) - returns(base, agent)
    se = diff.std(ddof=1) / np.sqrt(len(diff))
    print(f"{label:12s} planner {returns(acted, agent).mean():7.2f}  "
          f"baseline {returns(base, agent).mean():7.2f}  paired diff {diff.mean():+.2f} +- {se:.2f}")

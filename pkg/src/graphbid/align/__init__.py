"""Multi-KPI value learning, budget-feasible planning, RAFT fine-tuning and acting."""
from graphbid.align.act import (
    ActHistory,
    ActModels,
    ActTrace,
    act,
    act_batch,
    act_step,
    run_policy_batch,
)
from graphbid.align.plan import (
    KpiWeights,
    PlanCandidate,
    PlanContext,
    RaftPool,
    RaftResult,
    ValueModel,
    best_of_n_plan,
    keep_count,
    mean_sample_score,
    plan_many,
    plan_window,
    raft_pool,
    raft_round,
    score_trajectory,
    weighted_zscore,
    write_raft_log,
)
from graphbid.align.value import (
    HEAD_OUTPUTS,
    VALUE_KPIS,
    KpiNorm,
    ValueBatch,
    ValueHead,
    expectile_loss,
    fit_value_head,
    iql_value_update,
    predict_raw,
    value_targets,
    value_dataset,
)

__all__ = [
    "HEAD_OUTPUTS", "VALUE_KPIS", "ActHistory", "ActModels", "ActTrace", "KpiNorm", "KpiWeights",
    "PlanCandidate", "PlanContext", "RaftPool", "RaftResult", "ValueBatch", "ValueHead",
    "ValueModel", "act", "act_batch", "act_step", "best_of_n_plan", "expectile_loss", "fit_value_head",
    "iql_value_update", "keep_count", "mean_sample_score", "plan_many", "plan_window",
    "predict_raw", "raft_pool", "raft_round", "value_targets", "run_policy_batch",
    "score_trajectory", "value_dataset", "weighted_zscore", "write_raft_log",
]

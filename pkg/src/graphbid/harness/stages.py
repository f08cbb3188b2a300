"""Pipeline stages: data, graph, diffusion (+ joint + distillation), alignment, evaluations.

Everything a stage writes lives under one run directory::

    data/train, data/heldout          episode shards and manifests
    graph.ckpt                        graph encoder + inverse dynamics (first stage)
    graph_joint.ckpt, ldm.ckpt        after the diffusion stage and joint fine-tuning
    student.ckpt, latents.ckpt        distilled belief-graph encoder, latent cache
    value.ckpt, aligned_ldm.ckpt      value head and the RAFT-tuned diffusion model
    reports/<stage>/                  CSV tables and summaries of the evaluations
    stages/<stage>.json               stamp + output digests, used to resume

A stage whose stamp (config sections, seed, digests of its inputs) matches the
recorded one and whose outputs are intact is skipped.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from graphbid.align.act import ActModels, act_batch, run_policy_batch
from graphbid.align.plan import KpiWeights, ValueModel, mean_sample_score, raft_pool, \
    raft_round, write_raft_log
from graphbid.align.value import VALUE_KPIS, ValueHead, fit_value_head, value_dataset
from graphbid.auction.env import AuctionEnv
from graphbid.auction.kpi import KPI_NAMES, compute_kpis
from graphbid.auction.storage import MANIFEST, check_disjoint, episode_ids, load_episodes, \
    read_manifest
from graphbid.belief import distill, kd_mse, kd_samples, make_student, student_episodes
from graphbid.bidders import BidderConfig, ScalingPolicy, UniformScaler, episode_seed, \
    generate_dataset, sample_scalers
from graphbid.errors import ConfigurationError
from graphbid.harness.artifacts import load_encoder, load_graph, load_ldm, load_value, require, \
    save_encoder, save_graph, save_ldm, save_value
from graphbid.harness.config import ExperimentConfig
from graphbid.harness.report import MetricsReport, Table, export_report
from graphbid.idm import GraphModels, GraphTrainConfig, bid_accuracy, embed_episodes, \
    episode_transitions, predict_transitions, train_graph_models, transition_bid_pairs
from graphbid.joint import JointConfig, joint_fine_tune
from graphbid.ldm.data import LatentNorm, build_windows, cond_dim, load_latents, save_latents
from graphbid.ldm.denoiser import Denoiser
from graphbid.ldm.diffusion import LatentDiffusion, LdmTrainConfig, forecast_loglik
from graphbid.ldm.diffusion import train_ldm as fit_ldm
from graphbid.ldm.schedule import NoiseSchedule

log = logging.getLogger(__name__)

HELDOUT_SEED_OFFSET = 1000   # held-out episodes use base seed + this

# which stage writes each input a later stage may ask for
PRODUCER = {"data/train": "gen-data", "data/heldout": "gen-data", "graph.ckpt": "train-graph",
            "graph_joint.ckpt": "train-ldm", "ldm.ckpt": "train-ldm", "latents.ckpt": "train-ldm",
            "student.ckpt": "train-ldm", "value.ckpt": "align", "aligned_ldm.ckpt": "align"}


@dataclass
class StageResult:
    stage: str
    outputs: list[str]
    metrics: dict = field(default_factory=dict)
    skipped: bool = False


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(p.relative_to(path).as_posix().encode())
                h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


class Run:
    """A run directory together with the config and seed that produced it."""

    def __init__(self, cfg: ExperimentConfig, seed: int, out, force: bool = False):
        self.cfg, self.seed, self.out, self.force = cfg, int(seed), Path(out), force

    def path(self, name: str) -> Path:
        return self.out / name

    def relative(self, paths) -> list[str]:
        return [Path(p).relative_to(self.out).as_posix() for p in paths]

    @property
    def n_categories(self) -> int:
        return self.cfg.auction.n_categories

    @property
    def budget_scale(self) -> float:
        return self.cfg.auction.budget_high

    def execute(self, stage: str, sections: tuple[str, ...], inputs: list[str],
                body: Callable[[], tuple[list[str], dict]]) -> StageResult:
        stamp_file = self.path(f"stages/{stage}.json")
        for name in inputs:
            require(self.path(name), PRODUCER[name])
        stamp = hashlib.sha256(json.dumps({
            "stage": stage, "seed": self.seed,
            "config": self.cfg.section_hash(*sections),
            "inputs": {name: _digest(self.path(name)) for name in inputs},
        }, sort_keys=True).encode()).hexdigest()
        if not self.force and stamp_file.exists():
            done = json.loads(stamp_file.read_text())
            intact = done["stamp"] == stamp and all(
                self.path(n).exists() and _digest(self.path(n)) == d
                for n, d in done["outputs"].items())
            if intact:
                log.info("%s: outputs up to date, skipping", stage)
                return StageResult(stage, sorted(done["outputs"]), done["metrics"], True)
        outputs, metrics = body()
        stamp_file.parent.mkdir(parents=True, exist_ok=True)
        record = {"stage": stage, "stamp": stamp, "metrics": metrics,
                  "outputs": {n: _digest(self.path(n)) for n in sorted(outputs)}}
        stamp_file.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
        return StageResult(stage, sorted(outputs), metrics)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _graph_hp(run: Run) -> dict:
    g = run.cfg.graph
    return {"dim": g.dim, "layers": g.layers, "n_categories": run.n_categories, "ec": g.ec,
            "spl": g.spl, "cap_m": g.cap_m}


def _ldm_hp(run: Run) -> dict:
    m = run.cfg.ldm
    return {"dim": run.cfg.graph.dim, "n_categories": run.n_categories, "window": m.window,
            "diffusion_steps": m.diffusion_steps, "channels": m.channels, "blocks": m.blocks,
            "kernel": m.kernel, "emb_dim": m.emb_dim, "x0_clip": m.x0_clip}


def _new_ldm(run: Run, rng_key: int) -> LatentDiffusion:
    m = run.cfg.ldm
    denoiser = Denoiser(np.random.default_rng([run.seed, rng_key]), run.cfg.graph.dim,
                        cond_dim(run.n_categories), channels=m.channels, blocks=m.blocks,
                        kernel=m.kernel, emb_dim=m.emb_dim)
    return LatentDiffusion(denoiser, NoiseSchedule.cosine(m.diffusion_steps), m.x0_clip)


def _train_records(run: Run):
    require(run.path(f"data/train/{MANIFEST}"), "gen-data")
    return load_episodes(run.path("data/train"))


def _heldout_records(run: Run):
    require(run.path(f"data/heldout/{MANIFEST}"), "gen-data")
    held = read_manifest(run.path("data/heldout"))
    check_disjoint(episode_ids(read_manifest(run.path("data/train"))), held)
    return load_episodes(run.path("data/heldout"))


# ---------------------------------------------------------------------------
# training stages


def gen_data(run: Run) -> StageResult:
    def body():
        cfg = run.cfg
        train = generate_dataset(cfg.auction, cfg.data.episodes, run.seed,
                                 run.path("data/train"), cfg.data.bidders(), cfg.data.shard_size)
        held = generate_dataset(cfg.auction, cfg.data.heldout_episodes,
                                run.seed + HELDOUT_SEED_OFFSET, run.path("data/heldout"),
                                cfg.data.bidders(), cfg.data.shard_size)
        check_disjoint(episode_ids(train), held)
        return ["data/train", "data/heldout"], {"train_episodes": train["record_count"],
                                                "heldout_episodes": held["record_count"]}
    return run.execute("gen-data", ("auction", "data"), [], body)


def train_graph(run: Run) -> StageResult:
    def body():
        g = run.cfg.graph
        records = _train_records(run)
        transitions = [tr for r in records
                       for tr in episode_transitions(r, g.cap_m, run.n_categories)]
        models = GraphModels.create(run.seed, dim=g.dim, layers=g.layers,
                                    n_categories=run.n_categories, ec=g.ec, spl=g.spl)
        logged = train_graph_models(transitions, models, GraphTrainConfig(
            steps=g.steps, batch_size=g.batch_size, lr=g.lr, log_every=0), run.seed)
        save_graph(run.path("graph.ckpt"), models, _graph_hp(run))
        _write_csv(run.path("logs/graph.csv"), ["step", "idm_loss"],
                   [[i, f"{v:.6f}"] for i, v in enumerate(logged.losses)])
        return ["graph.ckpt", "logs/graph.csv"], {"final_idm_loss": logged.losses[-1]}
    return run.execute("train-graph", ("auction", "data", "graph"), ["data/train"], body)


def train_ldm(run: Run) -> StageResult:
    """Diffusion on frozen embeddings, then joint fine-tuning, then the student."""
    def body():
        g, m = run.cfg.graph, run.cfg.ldm
        models, _ = load_graph(run.path("graph.ckpt"))
        records = _train_records(run)
        latents = embed_episodes(records, models, g.cap_m, run.n_categories, run.budget_scale)
        norm = LatentNorm.fit(np.concatenate([e.latents for e in latents]))
        windows, cond, _ = build_windows(latents, norm, m.window, m.stride)
        ldm = _new_ldm(run, 61)
        losses = fit_ldm(windows, cond, ldm, LdmTrainConfig(
            steps=m.steps, batch_size=m.batch_size, lr=m.lr, p_unconditional=m.p_unconditional,
            log_every=0), run.seed)
        joint = joint_fine_tune(records, models, ldm, norm, m.window, JointConfig(
            steps=m.joint_steps, lr=m.joint_lr, gnn_lr=m.joint_gnn_lr,
            p_unconditional=m.p_unconditional, log_every=0), run.seed, g.cap_m,
            run.n_categories, run.budget_scale) if m.joint_steps else None
        latents = embed_episodes(records, models, g.cap_m, run.n_categories, run.budget_scale)
        save_graph(run.path("graph_joint.ckpt"), models, _graph_hp(run))
        save_ldm(run.path("ldm.ckpt"), ldm, norm, _ldm_hp(run))
        save_latents(run.path("latents.ckpt"), latents)
        # the student learns from the finished teacher
        kd_recs = records[:g.kd_episodes]
        samples = kd_samples(kd_recs, models.encoder, g.cap_m, run.n_categories, g.belief_h)
        student = make_student(models.encoder, run.seed)
        before = kd_mse(samples, student)
        distill(samples, student, steps=g.kd_steps, lr=g.kd_lr, seed=run.seed, log_every=0)
        after = kd_mse(samples, student)
        save_encoder(run.path("student.ckpt"), student,
                     {**_graph_hp(run), "belief_h": g.belief_h},
                     {"kd_mse_untrained": before, "kd_mse_trained": after})
        rows = [["ldm", i, f"{v:.6f}"] for i, v in enumerate(losses)]
        if joint is not None:
            rows += [["joint_ldm", i, f"{v:.6f}"] for i, v in enumerate(joint.ldm)]
            rows += [["joint_idm", i, f"{v:.6f}"] for i, v in enumerate(joint.idm)]
        _write_csv(run.path("logs/ldm.csv"), ["phase", "step", "loss"], rows)
        return (["graph_joint.ckpt", "ldm.ckpt", "latents.ckpt", "student.ckpt", "logs/ldm.csv"],
                {"final_ldm_loss": losses[-1], "kd_mse_untrained": before,
                 "kd_mse_trained": after})
    return run.execute("train-ldm", ("auction", "data", "graph", "ldm"),
                       ["data/train", "graph.ckpt"], body)


def kpi_weights(run: Run) -> KpiWeights:
    a = run.cfg.align
    return KpiWeights(a.w_return, a.w_cpa, a.w_roi, a.w_win_rate, a.w_social_welfare)


def align(run: Run) -> StageResult:
    def body():
        a = run.cfg.align
        ldm, norm, _ = load_ldm(run.path("ldm.ckpt"))
        require(run.path("latents.ckpt"), "train-ldm")
        latents, _ = load_latents(run.path("latents.ckpt"))
        records = _train_records(run)
        data, kn = value_dataset(latents, records, norm)
        head = ValueHead(np.random.default_rng([run.seed, 67]), run.cfg.graph.dim,
                         cond_dim(run.n_categories), hidden=a.value_hidden)
        vlosses = fit_value_head(data, head, steps=a.value_steps, lr=a.value_lr,
                                 tau=a.expectile, seed=run.seed, log_every=0)
        value = ValueModel(head, kn)
        save_value(run.path("value.ckpt"), value, {"dim": run.cfg.graph.dim,
                                                   "n_categories": run.n_categories,
                                                   "hidden": a.value_hidden})
        weights = kpi_weights(run)
        pool = raft_pool(latents, norm, run.cfg.ldm.window, a.raft_stride, records)
        score, kpis = mean_sample_score(ldm, pool, a.raft_m, value, weights, run.seed)
        rows = [{"round": 0, "mean_score": score, "kept_fraction": 0.0,
                 "feasible_fraction": math.nan,
                 **{f"mean_{k}": float(v) for k, v in zip(VALUE_KPIS, kpis)}}]
        for r in range(1, a.raft_rounds + 1):
            res = raft_round(ldm, pool, a.raft_m, a.raft_q, a.raft_steps, value, weights,
                             run.seed, round_index=r, lr=a.raft_lr, batch_size=a.raft_batch,
                             eval_seed=run.seed, group=a.raft_group, slack=a.slack)
            rows.append(res.row())
        save_ldm(run.path("aligned_ldm.ckpt"), ldm, norm, _ldm_hp(run))
        write_raft_log(rows, run.path("logs/raft.csv"))
        _write_csv(run.path("logs/value.csv"), ["step", "expectile_loss"],
                   [[i, f"{v:.6f}"] for i, v in enumerate(vlosses)])
        return (["value.ckpt", "aligned_ldm.ckpt", "logs/raft.csv", "logs/value.csv"],
                {"scores": [row["mean_score"] for row in rows]})
    return run.execute("align", ("auction", "data", "graph", "ldm", "align"),
                       ["ldm.ckpt", "latents.ckpt", "data/train"], body)


# ---------------------------------------------------------------------------
# evaluations


def eval_forecast(run: Run) -> StageResult:
    """Held-out forecasting bound of the trained, an untrained and the student pipeline."""
    def body():
        g, m, e = run.cfg.graph, run.cfg.ldm, run.cfg.eval
        held = _heldout_records(run)
        models, _ = load_graph(run.path("graph_joint.ckpt"), "train-ldm")
        ldm, norm, _ = load_ldm(run.path("ldm.ckpt"))
        student, _ = load_encoder(run.path("student.ckpt"), "train-ldm")
        untrained = _new_ldm(run, 71)
        teacher_lat = embed_episodes(held, models, g.cap_m, run.n_categories, run.budget_scale)
        student_lat = student_episodes(held, student, g.cap_m, run.n_categories,
                                       run.budget_scale, g.belief_h)
        rows = []
        for name, model, lats in (("trained", ldm, teacher_lat), ("untrained", untrained,
                                                                   teacher_lat),
                                  ("student", ldm, student_lat)):
            for k, ep in enumerate(lats):
                per_agent = [forecast_loglik(model, norm.apply(ep.agent_sequence(i)), ep.cond[i],
                                             e.forecast_split, m.window, e.forecast_draws, k)
                             for i in range(ep.latents.shape[1])]
                rows.append([name, ep.episode_id, ep.seed, e.forecast_split, e.forecast_draws,
                             float(np.mean(per_agent))])
        scores = {name: np.array([r[5] for r in rows if r[0] == name])
                  for name in ("trained", "untrained", "student")}
        summary = forecast_summary(scores)
        report = MetricsReport(run.cfg.config_hash(), run.seed, len(held))
        report.tables["forecast"] = Table(["model", "episode_id", "seed", "split", "draws",
                                           "score"], rows)
        report.tables["forecast_summary"] = Table(["metric", "value"],
                                                  [[k, v] for k, v in summary.items()])
        files = run.relative(export_report(report, run.path("reports/eval-forecast")))
        return files, summary
    return run.execute("eval-forecast", ("auction", "data", "graph", "ldm", "eval"),
                       ["data/heldout", "graph_joint.ckpt", "ldm.ckpt", "student.ckpt"], body)


def forecast_summary(scores: dict[str, np.ndarray]) -> dict:
    """Means, per-episode ordering and the student retention ratio.

    Scores are log-likelihood bounds per dimension and usually negative, so
    dividing them directly inverts their meaning. Retention is therefore the
    ratio of the per-dimension likelihoods, exp(student - teacher); the plain
    quotient of scores is reported next to it.
    """
    t, u, s = scores["trained"], scores["untrained"], scores["student"]
    return {
        "trained_mean": float(t.mean()),
        "untrained_mean": float(u.mean()),
        "student_mean": float(s.mean()),
        "trained_beats_untrained": int(np.sum(t > u)),
        "episodes": int(len(t)),
        "retention": float(math.exp(s.mean() - t.mean())),
        "score_quotient": float(s.mean() / t.mean()) if t.mean() != 0 else math.nan,
    }


def eval_policies(run: Run, ldm_name: str = "aligned_ldm.ckpt"):
    """(act records, baseline records, seeds) on the evaluation seeds."""
    cfg, e = run.cfg, run.cfg.eval
    models, _ = load_graph(run.path("graph_joint.ckpt"), "train-ldm")
    ldm, norm, _ = load_ldm(run.path(ldm_name), "align")
    value, _ = load_value(run.path("value.ckpt"))
    env_cfg = type(cfg.auction).from_dict({**cfg.auction.to_dict(), "hard_budget": e.hard_budget})
    if not 0 <= e.controlled_agent < env_cfg.n_agents:
        raise ConfigurationError("controlled_agent is not an agent of the auction")
    seeds = [episode_seed(e.seed_base, i) for i in range(e.seeds)]
    opponents = BidderConfig(p_uniform=e.opponent_p_uniform, alpha_low=cfg.data.alpha_low,
                             alpha_high=cfg.data.alpha_high)

    def others(s):
        return ScalingPolicy(sample_scalers(env_cfg, opponents, s))

    def baseline(s):
        policy = others(s)
        policy.scalers[e.controlled_agent] = UniformScaler(e.baseline_alpha)
        return policy

    base = run_policy_batch(env_cfg, seeds, [baseline(s) for s in seeds])
    act_models = ActModels(models, norm, ldm, value, kpi_weights(run), cfg.ldm.window,
                           cfg.align.candidates, cfg.graph.cap_m, run.n_categories,
                           run.budget_scale, cfg.align.slack)
    acted = act_batch([AuctionEnv(env_cfg, s) for s in seeds], act_models,
                      [e.controlled_agent], [others(s) for s in seeds], seed=run.seed)
    return acted, base, seeds


def eval_kpi(run: Run) -> StageResult:
    def body():
        e = run.cfg.eval
        acted, base, seeds = eval_policies(run)
        rows = kpi_rows({"aligned": acted, "baseline": base}, seeds, e.controlled_agent)
        report = MetricsReport(run.cfg.config_hash(), run.seed, len(seeds))
        report.tables["kpi"] = Table(["policy", "seed", *KPI_NAMES], rows)
        report.tables["kpi_summary"] = kpi_summary(rows, len(seeds))
        files = run.relative(export_report(report, run.path("reports/eval-kpi")))
        ret = {name: float(np.mean([r[2] for r in rows if r[0] == name]))
               for name in ("aligned", "baseline")}
        adherence = float(np.mean([r[2 + KPI_NAMES.index("budget_adherence")]
                                   for r in rows if r[0] == "aligned"]))
        return files, {"mean_return": ret, "aligned_adherence": adherence}
    return run.execute("eval-kpi", tuple(run.cfg.to_dict()),
                       ["graph_joint.ckpt", "aligned_ldm.ckpt", "value.ckpt"], body)


def kpi_rows(records: dict[str, list], seeds: list[int], agent: int) -> list[list]:
    """One row per (policy, seed): the controlled agent's KPIs in that episode."""
    rows = []
    for name, episodes in records.items():
        if len(episodes) != len(seeds):
            raise ConfigurationError(f"policy {name!r} has {len(episodes)} episodes for "
                                     f"{len(seeds)} seeds")
        for s, rec in zip(seeds, episodes):
            k = compute_kpis(rec, agents=[agent]).aggregate.as_dict()
            rows.append([name, s] + [k[n] for n in KPI_NAMES])
    return rows


def kpi_summary(rows: list[list], n_seeds: int) -> Table:
    """Mean and std over seeds of every KPI, per policy (infinite CPAs excluded)."""
    out = []
    for name in sorted({r[0] for r in rows}):
        mine = [r for r in rows if r[0] == name]
        for j, kpi in enumerate(KPI_NAMES):
            vals = np.array([r[2 + j] for r in mine], dtype=float)
            vals = vals[np.isfinite(vals)]
            mean = float(vals.mean()) if len(vals) else math.nan
            std = float(vals.std()) if len(vals) else math.nan
            out.append([name, kpi, mean, std, len(vals), n_seeds])
    return Table(["policy", "kpi", "mean", "std", "finite_seeds", "seeds"], out)


def eval_bid_accuracy(run: Run) -> StageResult:
    """Per-agent mean l2 distance of predicted to true bid vectors on held-out episodes.

    The reference is a predictor that bids the mean training bid on every exposed IO.
    """
    def body():
        g = run.cfg.graph
        held = _heldout_records(run)
        name = "graph_joint.ckpt" if run.path("graph_joint.ckpt").exists() else "graph.ckpt"
        models, _ = load_graph(run.path(name))
        train = _train_records(run)
        mean_bid = float(np.mean(np.concatenate(
            [tr.target for r in train for tr in episode_transitions(r, g.cap_m, run.n_categories)
             if tr.n_tuples])))
        transitions = [tr for r in held for tr in episode_transitions(r, g.cap_m,
                                                                       run.n_categories)]
        pred = predict_transitions(transitions, models)
        model_l2 = bid_accuracy(transition_bid_pairs(transitions, pred))
        flat = [np.full(len(p), mean_bid) for p in pred]
        base_l2 = bid_accuracy(transition_bid_pairs(transitions, flat))
        steps = {}
        for agent, _, _ in transition_bid_pairs(transitions, pred):
            steps[agent] = steps.get(agent, 0) + 1
        rows = [[a, model_l2[a], base_l2[a], steps[a]] for a in sorted(model_l2)]
        report = MetricsReport(run.cfg.config_hash(), run.seed, len(held))
        report.tables["bid_accuracy"] = Table(["agent", "model_l2", "mean_bid_l2", "steps"], rows)
        files = run.relative(export_report(report, run.path("reports/eval-bid-accuracy")))
        return files, {"model_l2": model_l2, "mean_bid_l2": base_l2, "checkpoint": name}
    return run.execute("eval-bid-accuracy", ("auction", "data", "graph"),
                       ["data/train", "data/heldout", "graph.ckpt"]
                       + (["graph_joint.ckpt"] if run.path("graph_joint.ckpt").exists() else []),
                       body)


STAGES: dict[str, Callable[[Run], StageResult]] = {
    "gen-data": gen_data,
    "train-graph": train_graph,
    "train-ldm": train_ldm,
    "align": align,
    "eval-forecast": eval_forecast,
    "eval-kpi": eval_kpi,
    "eval-bid-accuracy": eval_bid_accuracy,
}

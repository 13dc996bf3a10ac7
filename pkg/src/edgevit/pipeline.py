"""End-to-end derivation of an edge model, and the random-pruning baseline."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import budget as budget_mod
from .adaptive import PruneConfig, run_adaptive
from .data import Dataset, SubTask, batches, build_subtask_split
from .errors import UnreachableTarget
from .model import VitModel
from .oneshot import prune_depth, prune_heads, slice_classifier, train_depth_probes
from .score import score_groups
from .surgery import keep_embed_dims, keep_heads, keep_neurons, keep_qk_indices, keep_v_indices
from .train import TrainRun, evaluate, train

log = logging.getLogger(__name__)


@dataclass
class RecoveryConfig:
    epochs: int = 5
    lr: float = 1e-4
    weight_decay: float = 0.05
    batch_size: int = 64
    probe_epochs: int = 3


@dataclass
class DerivationReport:
    subtask: list[int]
    config: dict
    recovery: dict
    seed: int
    budget_before: dict = field(default_factory=dict)
    budget_after: dict = field(default_factory=dict)
    achieved_rate: float = 0.0
    reached: bool = False
    oneshot: dict = field(default_factory=dict)
    adaptive: dict = field(default_factory=dict)
    recovery_run: dict = field(default_factory=dict)
    accuracy: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    data: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def achieved_rate(edge: VitModel, base_cfg, metric: str) -> float:
    before = budget_mod.metric_value(base_cfg, metric)
    return 1.0 - budget_mod.metric_value(edge.config, metric) / before


def _recover(model, train_split, eval_split, rec: RecoveryConfig, seed: int, report):
    run = TrainRun(epochs=rec.epochs, batch_size=rec.batch_size, seed=seed, lr=rec.lr,
                   weight_decay=rec.weight_decay)
    if rec.epochs == 0:
        return model
    model, run = train(model, *train_split, run=run, eval_images=eval_split[0],
                       eval_labels=eval_split[1])
    report.recovery_run = run.to_json()
    return model


def _finish(report, edge, base, metric, train_split, eval_split):
    report.budget_after = budget_mod.budget_report(edge, budget_mod.Budget.of(base.config), metric)
    report.achieved_rate = achieved_rate(edge, base.config, metric)
    report.accuracy["edge_eval"] = evaluate(edge, *eval_split)
    report.accuracy["edge_train"] = evaluate(edge, *train_split)


def derive(base: VitModel, dataset: Dataset, subtask: SubTask, config: PruneConfig,
           recovery: RecoveryConfig | None = None, seed: int = 0):
    """Run one-shot pruning, adaptive pruning and recovery.

    Returns ``(edge model, DerivationReport)``. If the target cannot be met,
    :class:`UnreachableTarget` is raised with the best model (recovered) and
    the filled-in report attached.
    """
    recovery = RecoveryConfig() if recovery is None else recovery
    t0 = time.perf_counter()
    report = DerivationReport(list(subtask.classes), config.to_json(), asdict(recovery), seed)
    report.data = dict(dataset.normalization)
    metric = config.metric
    report.budget_before = budget_mod.budget_report(base, None, metric)
    tr, ev = build_subtask_split(dataset, subtask)
    train_split, eval_split = tr.xy, ev.xy

    sliced = slice_classifier(base, subtask)
    report.accuracy["sliced_base_eval"] = evaluate(sliced, *eval_split)
    report.accuracy["sliced_base_train"] = evaluate(sliced, *train_split)

    if config.alpha == 0:
        report.notes.append("alpha=0: classifier slicing only, no structural pruning or recovery")
        report.reached = True
        _finish(report, sliced, base, metric, train_split, eval_split)
        report.timings["total_s"] = time.perf_counter() - t0
        return sliced, report

    # one-shot: depth -> classifier -> heads
    t = time.perf_counter()
    probes = train_depth_probes(base, subtask, train_split, eval_split,
                                epochs=recovery.probe_epochs, lr=recovery.lr,
                                weight_decay=recovery.weight_decay,
                                batch_size=recovery.batch_size, seed=seed)
    if probes.accuracies[-1] < probes.accuracies[0]:
        msg = (f"depth probes: last-layer accuracy {probes.accuracies[-1]:.4f} is below "
               f"first-layer {probes.accuracies[0]:.4f}")
        log.warning("%s", msg)
        report.notes.append(msg)
    model = prune_depth(base, probes, config.rho_depth)
    model = slice_classifier(model, subtask)
    head_scores = score_groups(model, batches(*train_split, config.score_batch_size), "head")
    model = prune_heads(model, head_scores, config.rho_head, per_layer=config.per_layer_heads,
                        notes=report.notes)
    report.oneshot = {
        "depth": {"accuracies": probes.accuracies, "L_pruned": model.config.depth,
                  "rho": config.rho_depth},
        "heads": {"scores": head_scores.to_json()["scores"], "kept": list(model.config.heads),
                  "rho": config.rho_head},
        "budget_fraction": budget_mod.metric_value(model.config, metric)
        / budget_mod.metric_value(base.config, metric),
    }
    report.timings["oneshot_s"] = time.perf_counter() - t

    # embedding scores are task-agnostic by default: base model, every class
    t = time.perf_counter()
    if config.task_specific_embed:
        emb_model, emb_x, emb_y = sliced, *train_split
    else:
        train_all = dataset.part("train")
        emb_model, emb_x, emb_y = base, train_all.images, _base_labels(base, train_all.labels)
    embed_scores = score_groups(emb_model, batches(emb_x, emb_y, config.score_batch_size),
                                "embed_dim")
    report.timings["embed_scores_s"] = time.perf_counter() - t

    t = time.perf_counter()
    base_budget = budget_mod.metric_value(base.config, metric)
    try:
        model, adaptive = run_adaptive(model, train_split, config, base_budget, embed_scores,
                                       notes=report.notes)
        reached = True
    except UnreachableTarget as exc:
        model, adaptive, reached = exc.model, exc.report, False
    report.adaptive = {k: v for k, v in adaptive.items() if k != "notes"}
    report.timings["adaptive_s"] = time.perf_counter() - t
    report.accuracy["pruned_eval"] = evaluate(model, *eval_split)

    t = time.perf_counter()
    edge = _recover(model, train_split, eval_split, recovery, seed, report)
    report.timings["recovery_s"] = time.perf_counter() - t
    _finish(report, edge, base, metric, train_split, eval_split)
    report.reached = reached and report.achieved_rate >= config.alpha - 1e-12
    report.timings["total_s"] = time.perf_counter() - t0
    if not reached:
        raise UnreachableTarget(f"pruning rate {config.alpha} not reached; achieved "
                                f"{report.achieved_rate:.4f}", best_rate=report.achieved_rate,
                                model=edge, report=report)
    return edge, report


def _base_labels(model, labels):
    pos = {c: i for i, c in enumerate(model.class_ids)}
    return np.array([pos[int(y)] for y in labels], dtype=np.int64)


# ------------------------------------------------------------------ random baseline


def _round_keep(f, n, floor):
    return min(n, max(floor, int(math.floor(f * n + 0.5))))


class _RandomPlan:
    """Nested random orders for every prunable axis, drawn once from ``seed``."""

    def __init__(self, model: VitModel, seed: int):
        cfg = model.config
        rng = np.random.default_rng(seed)
        self.heads = [rng.permutation(h) for h in cfg.heads]
        self.qk = [[rng.permutation(cfg.qk_head_dim(l)) for _ in range(cfg.heads[l])]
                   for l in range(cfg.depth)]
        self.v = [[rng.permutation(cfg.v_head_dim(l)) for _ in range(cfg.heads[l])]
                  for l in range(cfg.depth)]
        self.neurons = [rng.permutation(e) for e in cfg.expansion_sizes]
        self.embed = rng.permutation(cfg.embed_dim)

    def apply(self, model: VitModel, f: float) -> VitModel:
        cfg = model.config
        out = model
        for l in range(cfg.depth):
            h, qh, vh = cfg.heads[l], cfg.qk_head_dim(l), cfg.v_head_dim(l)
            hk = sorted(int(x) for x in self.heads[l][:_round_keep(f, h, 1)])
            rq, rv = _round_keep(f, qh, 1), _round_keep(f, vh, 1)
            qi = [pos * qh + int(j) for pos, hh in enumerate(hk) for j in sorted(self.qk[l][hh][:rq])]
            vi = [pos * vh + int(j) for pos, hh in enumerate(hk) for j in sorted(self.v[l][hh][:rv])]
            if len(hk) < h:
                out = keep_heads(out, l, hk)
            if rq < qh:
                out = keep_qk_indices(out, l, qi, scale=math.sqrt(len(qi) / out.config.qk_sizes[l]))
            if rv < vh:
                out = keep_v_indices(out, l, vi)
            ke = _round_keep(f, cfg.expansion_sizes[l], 0)
            if ke < cfg.expansion_sizes[l]:
                out = keep_neurons(out, l, self.neurons[l][:ke])
        kd = _round_keep(f, cfg.embed_dim, 1)
        if kd < cfg.embed_dim:
            out = keep_embed_dims(out, self.embed[:kd])
        return out if out is not model else model.copy()


def random_prune_structure(model: VitModel, alpha: float, metric: str, seed: int,
                           base_budget: int | None = None, step: float = 0.01):
    """Uniform random pruning of heads, q/v ranks, neurons and embedding dims.

    One keep fraction ``f`` applies to every axis and layer; it is lowered
    from 1 in steps of ``step`` until the budget target is met. Returns
    ``(model, f)``.
    """
    base_budget = budget_mod.metric_value(model.config, metric) if base_budget is None else base_budget
    target = 1.0 - alpha
    plan = _RandomPlan(model, seed)
    for i in range(int(round(1 / step)) + 1):
        f = max(0.0, 1.0 - i * step)
        cand = plan.apply(model, f)
        if budget_mod.metric_value(cand.config, metric) / base_budget <= target + 1e-12:
            return cand, f
    raise UnreachableTarget(f"random pruning cannot reach alpha={alpha}",
                            best_rate=1.0 - budget_mod.metric_value(cand.config, metric) / base_budget,
                            model=cand)


def random_prune(base: VitModel, dataset: Dataset, subtask: SubTask, alpha: float,
                 metric: str = "params", recovery: RecoveryConfig | None = None, seed: int = 0):
    """Random-pruning baseline with the same slicing and recovery as :func:`derive`."""
    recovery = RecoveryConfig() if recovery is None else recovery
    t0 = time.perf_counter()
    report = DerivationReport(list(subtask.classes), {"alpha": alpha, "metric": metric,
                                                      "method": "random"},
                              asdict(recovery), seed)
    report.budget_before = budget_mod.budget_report(base, None, metric)
    tr, ev = build_subtask_split(dataset, subtask)
    train_split, eval_split = tr.xy, ev.xy
    sliced = slice_classifier(base, subtask)
    report.accuracy["sliced_base_eval"] = evaluate(sliced, *eval_split)
    if alpha == 0:
        report.reached = True
        _finish(report, sliced, base, metric, train_split, eval_split)
        return sliced, report
    base_budget = budget_mod.metric_value(base.config, metric)
    model, f = random_prune_structure(sliced, alpha, metric, seed, base_budget)
    report.adaptive = {"keep_fraction": f, "heads": list(model.config.heads),
                       "q": list(model.config.qk_sizes), "v": list(model.config.v_sizes),
                       "e": list(model.config.expansion_sizes), "d": model.config.embed_dim}
    report.accuracy["pruned_eval"] = evaluate(model, *eval_split)
    edge = _recover(model, train_split, eval_split, recovery, seed, report)
    _finish(report, edge, base, metric, train_split, eval_split)
    report.reached = report.achieved_rate >= alpha - 1e-12
    report.timings["total_s"] = time.perf_counter() - t0
    return edge, report

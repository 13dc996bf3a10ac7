"""First derivation stage: depth (early-exit probes), classifier slicing, heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SubTask
from .grad import probe_backward
from .model import Probe, VitModel, cls_features
from .score import ImportanceMap
from .surgery import keep_heads, keep_layers, minimal_prefix
from .train import AdamW


def slice_classifier(model: VitModel, subtask: SubTask) -> VitModel:
    """Keep classifier rows for ``subtask.classes`` (in sub-task order)."""
    pos = {c: i for i, c in enumerate(model.class_ids)}
    unknown = [c for c in subtask.classes if c not in pos]
    if unknown:
        raise ValueError(f"classes {unknown} are not recognised by the model")
    rows = np.array([pos[c] for c in subtask.classes], dtype=np.int64)
    out = model.copy()
    if list(out.class_ids) == list(subtask.classes):
        return out
    out.params["head.weight"] = out.params["head.weight"][rows]
    out.params["head.bias"] = out.params["head.bias"][rows]
    out.class_ids = list(subtask.classes)
    out.config.num_classes = len(rows)
    out.validate()
    return out


@dataclass
class DepthProbeSet:
    probes: list[Probe]  # probes[l] reads the cls token after block l
    accuracies: list[float]
    class_ids: list[int]

    def to_json(self) -> dict:
        return {"accuracies": list(self.accuracies), "class_ids": list(self.class_ids)}

    def to_aux(self) -> dict[str, np.ndarray]:
        out = {}
        for l, p in enumerate(self.probes):
            for name, t in p.tensors().items():
                out[f"probes.{l}.{name}"] = np.asarray(t, np.float32)
        return out


def _features(model, images, batch_size=256):
    per_layer = None
    for s in range(0, len(images), batch_size):
        feats = cls_features(model, images[s:s + batch_size], all_layers=True)
        per_layer = [[f] for f in feats] if per_layer is None else \
            [acc + [f] for acc, f in zip(per_layer, feats)]
    return [np.concatenate(f) for f in per_layer]


def _probe_accuracy(probe: Probe, feats, labels, eps):
    from .linalg import layernorm
    fn = layernorm(feats, probe.ln_gamma, probe.ln_beta, eps)
    logits = fn @ np.asarray(probe.weight, np.float64).T + np.asarray(probe.bias, np.float64)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def train_depth_probes(model: VitModel, subtask: SubTask, train_split, eval_split,
                       epochs: int = 3, lr: float = 1e-4, weight_decay: float = 0.05,
                       batch_size: int = 64, seed: int = 0) -> DepthProbeSet:
    """Fit one LayerNorm+linear probe per block on frozen cls features.

    Every probe starts from the sliced classifier head. Splits are
    ``(images, labels)`` with sub-task labels; accuracy is measured on
    ``eval_split``.
    """
    (xtr, ytr), (xev, yev) = train_split, eval_split
    if len(ytr) == 0 or len(yev) == 0:
        raise ValueError("depth probes need non-empty train and eval splits")
    sliced = slice_classifier(model, subtask)
    eps = model.config.layernorm_eps
    ftr, fev = _features(model, xtr), _features(model, xev)
    ytr, yev = np.asarray(ytr), np.asarray(yev)
    probes, accs = [], []
    for l in range(model.config.depth):
        base = sliced.head
        p = {k: np.asarray(t, np.float64).copy() for k, t in base.tensors().items()}
        opt = AdamW(p, lr=lr, weight_decay=weight_decay)
        rng = np.random.default_rng(seed + l)
        for _ in range(epochs):
            order = rng.permutation(len(ytr))
            for s in range(0, len(ytr), batch_size):
                idx = order[s:s + batch_size]
                probe = Probe(p["ln.gamma"], p["ln.beta"], p["weight"], p["bias"])
                _, g = probe_backward(ftr[l][idx], probe, ytr[idx], eps)
                opt.step(p, g)
        probe = Probe(*(p[k].astype(np.float32) for k in ("ln.gamma", "ln.beta", "weight", "bias")))
        probes.append(probe)
        accs.append(_probe_accuracy(probe, fev[l], yev, eps))
    return DepthProbeSet(probes, accs, list(subtask.classes))


def select_depth(accuracies, rho_depth: float) -> int:
    """Smallest depth whose probe accuracy reaches ``rho_depth`` x the last probe's."""
    if not 0 < rho_depth <= 1:
        raise ValueError("rho_depth must lie in (0, 1]")
    threshold = rho_depth * accuracies[-1]
    for depth, acc in enumerate(accuracies, start=1):
        if acc >= threshold:
            return depth
    return len(accuracies)


def prune_depth(model: VitModel, probes: DepthProbeSet, rho_depth: float = 0.95) -> VitModel:
    if len(probes.probes) != model.config.depth:
        raise ValueError("need one probe per encoder block")
    depth = select_depth(probes.accuracies, rho_depth)
    out = keep_layers(model, depth)
    out.set_head(probes.probes[depth - 1], probes.class_ids)
    out.aux = {k: v for k, v in out.aux.items() if not k.startswith("probes.")}
    out.validate()
    return out


def prune_heads(model: VitModel, head_scores: ImportanceMap, rho_head: float = 0.90,
                per_layer: bool = False, notes: list | None = None) -> VitModel:
    """Drop low-importance heads, keeping the minimal top set reaching ``rho_head``.

    Heads are ranked globally across layers unless ``per_layer``. A layer that
    would lose every head keeps its best one and a note is appended to ``notes``.
    """
    if head_scores.kind != "head":
        raise ValueError("prune_heads needs head scores")
    if not 0 < rho_head <= 1:
        raise ValueError("rho_head must lie in (0, 1]")
    keys, scores = head_scores.keys, head_scores.scores
    keep: dict[int, set] = {l: set() for l in range(model.config.depth)}
    if per_layer:
        for l in range(model.config.depth):
            idx = [i for i, (kl, _) in enumerate(keys) if kl == l]
            for j in minimal_prefix(scores[idx], rho_head):
                keep[l].add(keys[idx[j]][1])
    else:
        for j in minimal_prefix(scores, rho_head):
            keep[keys[j][0]].add(keys[j][1])
    out = model
    for l in range(model.config.depth):
        if not keep[l]:
            local = [(s, -h) for (kl, h), s in zip(keys, scores) if kl == l]
            best = -max(local)[1]
            keep[l] = {best}
            if notes is not None:
                notes.append(f"heads: layer {l} would lose all heads; kept head {best}")
        if len(keep[l]) < model.config.heads[l]:
            out = keep_heads(out, l, keep[l])
    return out if out is not model else model.copy()

"""Taylor importance of structured weight groups.

A weight's importance on one sample is ``|dL/dw * w|``; a group's importance
sums its members, and the group score averages that over samples. The sum
of absolute values is taken per sample, before averaging.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .grad import per_sample_backward
from .model import VitModel, lkey, mlp_cls_activations

KINDS = ("head", "neuron", "embed_dim", "qk_index", "v_index")


@dataclass
class WeightGroup:
    kind: str
    layer: int | None
    index: int
    members: dict[str, tuple] = field(default_factory=dict)  # tensor name -> numpy index

    @property
    def key(self):
        return (self.layer, self.index)


def group_members(model: VitModel, kind: str) -> list[WeightGroup]:
    """Enumerate the groups of one kind in canonical (layer, index) order."""
    cfg = model.config
    groups: list[WeightGroup] = []
    if kind == "head":
        for l in range(cfg.depth):
            qh, vh = cfg.qk_head_dim(l), cfg.v_head_dim(l)
            for h in range(cfg.heads[l]):
                qs, vs = slice(h * qh, (h + 1) * qh), slice(h * vh, (h + 1) * vh)
                groups.append(WeightGroup(kind, l, h, {
                    lkey(l, "wq"): (qs,), lkey(l, "bq"): (qs,),
                    lkey(l, "wk"): (qs,), lkey(l, "bk"): (qs,),
                    lkey(l, "wv"): (vs,), lkey(l, "bv"): (vs,),
                    lkey(l, "wo"): (slice(None), vs),
                }))
    elif kind == "neuron":
        for l in range(cfg.depth):
            for i in range(cfg.expansion_sizes[l]):
                groups.append(WeightGroup(kind, l, i, {
                    lkey(l, "w1"): (i,), lkey(l, "b1"): (i,), lkey(l, "w2"): (slice(None), i),
                }))
    elif kind == "qk_index":
        for l in range(cfg.depth):
            for j in range(cfg.qk_sizes[l]):
                groups.append(WeightGroup(kind, l, j, {
                    lkey(l, "wq"): (j,), lkey(l, "bq"): (j,),
                    lkey(l, "wk"): (j,), lkey(l, "bk"): (j,),
                }))
    elif kind == "v_index":
        for l in range(cfg.depth):
            for j in range(cfg.v_sizes[l]):
                groups.append(WeightGroup(kind, l, j, {
                    lkey(l, "wv"): (j,), lkey(l, "bv"): (j,), lkey(l, "wo"): (slice(None), j),
                }))
    elif kind == "embed_dim":
        for j in range(cfg.embed_dim):
            mem = {
                "patch_embed.weight": (j,), "patch_embed.bias": (j,), "cls_token": (j,),
                "pos_embed": (slice(None), j),
                "head.ln.gamma": (j,), "head.ln.beta": (j,), "head.weight": (slice(None), j),
            }
            for l in range(cfg.depth):
                for ln in ("ln1.gamma", "ln1.beta", "ln2.gamma", "ln2.beta"):
                    mem[lkey(l, ln)] = (j,)
                for w in ("wq", "wk", "wv", "w1"):
                    mem[lkey(l, w)] = (slice(None), j)
                for w in ("wo", "w2"):
                    mem[lkey(l, w)] = (j,)
                mem[lkey(l, "bo")] = (j,)
                mem[lkey(l, "b2")] = (j,)
            groups.append(WeightGroup(kind, None, j, mem))
    else:
        raise ValueError(f"unknown group kind {kind!r}; expected one of {KINDS}")
    return groups


def population(model: VitModel, kind: str) -> list[str]:
    """Tensor names whose coordinates are partitioned by groups of ``kind``."""
    names = set()
    for g in group_members(model, kind):
        names.update(g.members)
    return sorted(names)


@dataclass
class ImportanceMap:
    kind: str
    keys: list[tuple]  # (layer or None, index), canonical order
    scores: np.ndarray
    sample_count: int
    task_id: str | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.keys),):
            raise ValueError("one score per key required")
        if not np.all(np.isfinite(self.scores)) or np.any(self.scores < 0):
            raise ValueError("scores must be finite and non-negative")

    def as_dict(self) -> dict:
        return {k: float(s) for k, s in zip(self.keys, self.scores)}

    def layer_scores(self, layer) -> np.ndarray:
        return np.array([s for (l, _), s in zip(self.keys, self.scores) if l == layer])

    def subset(self, keep_keys) -> "ImportanceMap":
        lookup = self.as_dict()
        keys = list(keep_keys)
        return ImportanceMap(self.kind, keys, np.array([lookup[k] for k in keys]),
                             self.sample_count, self.task_id)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "task_id": self.task_id,
            "sample_count": self.sample_count,
            "scores": [{"layer": l, "index": i, "score": float(s)}
                       for (l, i), s in zip(self.keys, self.scores)],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ImportanceMap":
        keys = [(e["layer"], int(e["index"])) for e in doc["scores"]]
        return cls(doc["kind"], keys, np.array([e["score"] for e in doc["scores"]]),
                   int(doc["sample_count"]), doc.get("task_id"))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1)


def _abs_taylor(grads, params):
    return {k: np.abs(g * np.asarray(params[k], np.float64)) for k, g in grads.items()}


def _reduce(kind, model, t):
    """Per-sample group sums from per-sample |g*w| tensors; returns (B, n_groups)."""
    cfg = model.config
    cols = []
    if kind == "head":
        for l in range(cfg.depth):
            h, qh, vh = cfg.heads[l], cfg.qk_head_dim(l), cfg.v_head_dim(l)
            b = t[lkey(l, "wq")].shape[0]
            s = (t[lkey(l, "wq")].reshape(b, h, qh, -1).sum(axis=(2, 3))
                 + t[lkey(l, "wk")].reshape(b, h, qh, -1).sum(axis=(2, 3))
                 + t[lkey(l, "bq")].reshape(b, h, qh).sum(axis=2)
                 + t[lkey(l, "bk")].reshape(b, h, qh).sum(axis=2)
                 + t[lkey(l, "wv")].reshape(b, h, vh, -1).sum(axis=(2, 3))
                 + t[lkey(l, "bv")].reshape(b, h, vh).sum(axis=2)
                 + t[lkey(l, "wo")].reshape(b, -1, h, vh).sum(axis=(1, 3)))
            cols.append(s)
    elif kind == "neuron":
        for l in range(cfg.depth):
            cols.append(t[lkey(l, "w1")].sum(axis=2) + t[lkey(l, "b1")]
                        + t[lkey(l, "w2")].sum(axis=1))
    elif kind == "qk_index":
        for l in range(cfg.depth):
            cols.append(t[lkey(l, "wq")].sum(axis=2) + t[lkey(l, "bq")]
                        + t[lkey(l, "wk")].sum(axis=2) + t[lkey(l, "bk")])
    elif kind == "v_index":
        for l in range(cfg.depth):
            cols.append(t[lkey(l, "wv")].sum(axis=2) + t[lkey(l, "bv")]
                        + t[lkey(l, "wo")].sum(axis=1))
    elif kind == "embed_dim":
        s = (t["patch_embed.weight"].sum(axis=2) + t["patch_embed.bias"] + t["cls_token"]
             + t["pos_embed"].sum(axis=1) + t["head.ln.gamma"] + t["head.ln.beta"]
             + t["head.weight"].sum(axis=1))
        for l in range(cfg.depth):
            for ln in ("ln1.gamma", "ln1.beta", "ln2.gamma", "ln2.beta"):
                s = s + t[lkey(l, ln)]
            for w in ("wq", "wk", "wv", "w1"):
                s = s + t[lkey(l, w)].sum(axis=1)
            for w in ("wo", "w2"):
                s = s + t[lkey(l, w)].sum(axis=2)
            s = s + t[lkey(l, "bo")] + t[lkey(l, "b2")]
        cols.append(s)
    else:
        raise ValueError(f"unknown group kind {kind!r}")
    return np.concatenate(cols, axis=1)


def group_keys(model: VitModel, kind: str) -> list[tuple]:
    return [g.key for g in group_members(model, kind)]


def score_groups(model: VitModel, batches, kind: str, loss_scale: float = 1.0,
                 task_id: str | None = None) -> ImportanceMap:
    """Average per-sample Taylor importance of every group of ``kind``.

    ``batches`` yields ``(images, labels)`` with labels already indexing the
    model's classifier rows.
    """
    keys = group_keys(model, kind)
    total = np.zeros(len(keys))
    count = 0
    for images, labels in batches:
        if len(labels) == 0:
            continue
        _, grads = per_sample_backward(model, images, labels, loss_scale=loss_scale)
        per_sample = _reduce(kind, model, _abs_taylor(grads, model.params))
        # accumulate sample by sample so the total does not depend on batch boundaries
        for row in per_sample:
            total += row
        count += len(labels)
    if count == 0:
        raise ValueError("score_groups needs at least one non-empty batch")
    return ImportanceMap(kind, keys, total / count, count, task_id)


def score_groups_reference(model: VitModel, images, labels, kind: str) -> ImportanceMap:
    """Slow path: score each :class:`WeightGroup` by indexing its member coordinates."""
    _, grads = per_sample_backward(model, images, labels)
    t = _abs_taylor(grads, model.params)
    groups = group_members(model, kind)
    vals = []
    for g in groups:
        s = np.zeros(len(labels))
        for name, idx in g.members.items():
            part = t[name][(slice(None),) + idx]
            s += part.reshape(len(labels), -1).sum(axis=1)
        vals.append(s.mean())
    return ImportanceMap(kind, [g.key for g in groups], np.array(vals), len(labels))


def score_similarity(a: ImportanceMap, b: ImportanceMap) -> float:
    """Cosine similarity of two score vectors over the same groups."""
    if a.kind != b.kind or list(a.keys) != list(b.keys):
        raise ValueError("score maps cover different group populations")
    na, nb = np.linalg.norm(a.scores), np.linalg.norm(b.scores)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a.scores, b.scores) / (na * nb))


def top_activating_samples(model: VitModel, images, layer: int, neuron: int, k: int,
                           batch_size: int = 256) -> list[int]:
    """Indices of the ``k`` images with the largest cls activation of one MLP neuron."""
    n = len(images)
    if not 0 <= k <= n:
        raise ValueError(f"k={k} outside 0..{n}")
    if not 0 <= layer < model.config.depth:
        raise ValueError(f"layer {layer} outside 0..{model.config.depth - 1}")
    if not 0 <= neuron < model.config.expansion_sizes[layer]:
        raise ValueError(f"neuron {neuron} out of range for layer {layer}")
    acts = np.concatenate([
        mlp_cls_activations(model, images[s:s + batch_size], layer)[:, neuron]
        for s in range(0, n, batch_size)
    ]) if n else np.zeros(0)
    order = np.argsort(-acts, kind="stable")
    return [int(i) for i in order[:k]]

"""Structural edits: drop heads, neurons, layers, embedding dimensions.

All functions return a modified copy and keep :class:`VitModel` invariants.
"""

from __future__ import annotations

import numpy as np

from .model import ATTN_KEYS, MLP_KEYS, VitModel, lkey


def minimal_prefix(scores, rho: float, total: float | None = None) -> np.ndarray:
    """Minimal top-scoring set whose cumulative share reaches ``rho``.

    Scores are ranked descending, ties by ascending index. The kept set is
    the shortest ranked prefix with ``sum(prefix) / total >= rho``, so dropping
    its last member would bring the share below ``rho``. ``total`` defaults to
    the sum of ``scores``. If the total is zero nothing can be ranked and
    every index is kept. Returns kept indices in rank order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    order = np.lexsort((np.arange(n), -scores))
    if rho <= 0:
        return order[:0]
    total = float(scores.sum()) if total is None else float(total)
    if total <= 0:
        return order
    frac = np.cumsum(scores[order]) / total
    hit = np.flatnonzero(frac >= rho)
    m = int(hit[0]) + 1 if hit.size else n
    return order[:m]


def keep_heads(model: VitModel, layer: int, heads) -> VitModel:
    cfg = model.config
    heads = sorted(int(h) for h in heads)
    qh, vh = cfg.qk_head_dim(layer), cfg.v_head_dim(layer)
    q_idx = np.concatenate([np.arange(h * qh, (h + 1) * qh) for h in heads]).astype(np.int64)
    v_idx = np.concatenate([np.arange(h * vh, (h + 1) * vh) for h in heads]).astype(np.int64)
    out = model.copy()
    p = out.params
    for name in ("wq", "bq", "wk", "bk"):
        p[lkey(layer, name)] = p[lkey(layer, name)][q_idx]
    for name in ("wv", "bv"):
        p[lkey(layer, name)] = p[lkey(layer, name)][v_idx]
    p[lkey(layer, "wo")] = p[lkey(layer, "wo")][:, v_idx]
    out.config.heads[layer] = len(heads)
    out.config.qk_sizes[layer] = len(q_idx)
    out.config.v_sizes[layer] = len(v_idx)
    out.validate()
    return out


def keep_qk_indices(model: VitModel, layer: int, idx, scale: float = 1.0) -> VitModel:
    """Keep query-key rows ``idx`` (must give every head the same width)."""
    idx = np.asarray(idx, dtype=np.int64)
    out = model.copy()
    p = out.params
    for name in ("wq", "bq"):
        p[lkey(layer, name)] = (p[lkey(layer, name)][idx] * scale).astype(p[lkey(layer, name)].dtype)
    for name in ("wk", "bk"):
        p[lkey(layer, name)] = p[lkey(layer, name)][idx]
    out.config.qk_sizes[layer] = len(idx)
    out.validate()
    return out


def keep_v_indices(model: VitModel, layer: int, idx) -> VitModel:
    idx = np.asarray(idx, dtype=np.int64)
    out = model.copy()
    p = out.params
    p[lkey(layer, "wv")] = p[lkey(layer, "wv")][idx]
    p[lkey(layer, "bv")] = p[lkey(layer, "bv")][idx]
    p[lkey(layer, "wo")] = p[lkey(layer, "wo")][:, idx]
    out.config.v_sizes[layer] = len(idx)
    out.validate()
    return out


def keep_neurons(model: VitModel, layer: int, idx) -> VitModel:
    idx = np.asarray(sorted(int(i) for i in idx), dtype=np.int64)
    out = model.copy()
    p = out.params
    p[lkey(layer, "w1")] = p[lkey(layer, "w1")][idx]
    p[lkey(layer, "b1")] = p[lkey(layer, "b1")][idx]
    p[lkey(layer, "w2")] = p[lkey(layer, "w2")][:, idx]
    out.config.expansion_sizes[layer] = len(idx)
    out.validate()
    return out


def keep_layers(model: VitModel, depth: int) -> VitModel:
    """Truncate to the first ``depth`` encoder blocks."""
    out = model.copy()
    for l in range(depth, model.config.depth):
        for name in ATTN_KEYS + MLP_KEYS + ("ln1.gamma", "ln1.beta", "ln2.gamma", "ln2.beta"):
            del out.params[lkey(l, name)]
    cfg = out.config
    cfg.heads = cfg.heads[:depth]
    cfg.qk_sizes = cfg.qk_sizes[:depth]
    cfg.v_sizes = cfg.v_sizes[:depth]
    cfg.expansion_sizes = cfg.expansion_sizes[:depth]
    out.validate()
    return out


# (tensor-name suffix, axis carrying the residual-stream dimension)
_EMBED_AXES = {
    "patch_embed.weight": 0, "patch_embed.bias": 0, "cls_token": 0, "pos_embed": 1,
    "head.ln.gamma": 0, "head.ln.beta": 0, "head.weight": 1,
    "ln1.gamma": 0, "ln1.beta": 0, "ln2.gamma": 0, "ln2.beta": 0,
    "attn.wq": 1, "attn.wk": 1, "attn.wv": 1, "mlp.w1": 1,
    "attn.wo": 0, "mlp.w2": 0, "attn.bo": 0, "mlp.b2": 0,
}


def embed_axis(name: str):
    """Axis of tensor ``name`` that indexes the embedding, or None."""
    if name in _EMBED_AXES:
        return _EMBED_AXES[name]
    if name.startswith("layers."):
        return _EMBED_AXES.get(name.split(".", 2)[2])
    if name.startswith("probes."):
        return {"ln.gamma": 0, "ln.beta": 0, "weight": 1}.get(name.split(".", 2)[2])
    return None


def keep_embed_dims(model: VitModel, dims) -> VitModel:
    """Keep residual-stream dimensions ``dims`` in every tensor (probes included)."""
    dims = np.asarray(sorted(int(j) for j in dims), dtype=np.int64)
    out = model.copy()
    for store in (out.params, out.aux):
        for name, t in store.items():
            ax = embed_axis(name)
            if ax is not None:
                store[name] = np.take(t, dims, axis=ax)
    out.config.embed_dim = len(dims)
    out.validate()
    return out

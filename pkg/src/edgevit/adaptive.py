"""Second derivation stage: iterative pruning of q, v, e and d.

Query-key and value sizes shrink via truncated SVD of each head's bilinear
product (bias folded in as an extra input coordinate). Expansion and
embedding sizes shrink by Taylor score. All thresholds start at 1 and decay
every iteration until the budget target is met.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import budget as budget_mod
from .data import batches
from .errors import UnreachableTarget
from .linalg import svd
from .model import VitModel, lkey
from .score import ImportanceMap, score_groups
from .surgery import keep_embed_dims, keep_neurons, keep_qk_indices, keep_v_indices, minimal_prefix

log = logging.getLogger(__name__)


@dataclass
class PruneConfig:
    alpha: float = 0.5
    metric: str = "params"
    rho_depth: float = 0.95
    rho_head: float = 0.90
    gamma_qkv: float = 0.01
    gamma_exp: float = 0.05
    gamma_emb: float = 0.025
    max_iterations: int = 200
    svd_mode: str = "product"
    decay: str = "subtractive"
    per_layer_heads: bool = False
    task_specific_embed: bool = False
    score_batch_size: int = 32

    def __post_init__(self):
        if self.metric not in ("params", "flops"):
            raise ValueError(f"metric must be 'params' or 'flops', got {self.metric!r}")
        if self.svd_mode not in ("product", "joint"):
            raise ValueError(f"svd_mode must be 'product' or 'joint', got {self.svd_mode!r}")
        if self.decay not in ("subtractive", "multiplicative"):
            raise ValueError("decay must be 'subtractive' or 'multiplicative'")

    @staticmethod
    def gammas_from_ratio(gamma_qkv: float, ratio: str = "1:5:2.5"):
        a, b, c = (float(x) for x in ratio.split(":"))
        return gamma_qkv, gamma_qkv * b / a, gamma_qkv * c / a

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DecayState:
    k: int
    gamma_qkv: float = 0.01
    gamma_exp: float = 0.05
    gamma_emb: float = 0.025
    law: str = "subtractive"

    def _rho(self, gamma):
        if self.law == "multiplicative":
            return max(0.0, (1.0 - gamma) ** self.k)
        return max(0.0, 1.0 - self.k * gamma)

    @property
    def rho_qkv(self) -> float:
        return self._rho(self.gamma_qkv)

    @property
    def rho_exp(self) -> float:
        return self._rho(self.gamma_exp)

    @property
    def rho_emb(self) -> float:
        return self._rho(self.gamma_emb)

    @property
    def exhausted(self) -> bool:
        return self.rho_qkv <= 0 and self.rho_exp <= 0 and self.rho_emb <= 0


# ----------------------------------------------------------------- q / v via SVD


def uniform_rank(energies: list[np.ndarray], rho: float) -> int:
    """Smallest per-head rank r whose summed top-r energy share reaches ``rho``.

    ``energies[h]`` holds head h's squared singular values (descending). Returns
    0 when ``rho <= 0`` or when there is no energy at all (nothing to keep).
    """
    width = len(energies[0])
    if rho <= 0:
        return 0
    total = float(sum(e.sum() for e in energies))
    if total <= 0:
        return 0
    for r in range(1, width + 1):
        if sum(float(e[:r].sum()) for e in energies) / total >= rho:
            return r
    return width


def _augment(w, b):
    return np.concatenate([np.asarray(w, np.float64), np.asarray(b, np.float64)[:, None]], axis=1)


def _qk_factors(model, layer, mode):
    """Per-head (energies, rebuild(r, scale)) for the query-key product."""
    cfg = model.config
    p = model.params
    h, qh = cfg.heads[layer], cfg.qk_head_dim(layer)
    wq = _augment(p[lkey(layer, "wq")], p[lkey(layer, "bq")])
    wk = _augment(p[lkey(layer, "wk")], p[lkey(layer, "bk")])
    out = []
    for i in range(h):
        aq, ak = wq[i * qh:(i + 1) * qh], wk[i * qh:(i + 1) * qh]
        if mode == "product":
            f = svd(aq.T @ ak)
            sig = f.sigma[:qh]

            def rebuild(r, scale, f=f, sig=sig):
                root = np.sqrt(sig[:r])
                return (f.u[:, :r] * root).T * scale, root[:, None] * f.vt[:r]
        else:
            f = svd(np.concatenate([aq, ak], axis=1))
            sig = f.sigma[:qh]

            def rebuild(r, scale, f=f, aq=aq, ak=ak):
                ur = f.u[:, :r]
                return (ur.T @ aq) * scale, ur.T @ ak
        out.append((sig ** 2, rebuild))
    return out


def _v_factors(model, layer, mode):
    cfg = model.config
    p = model.params
    h, vh = cfg.heads[layer], cfg.v_head_dim(layer)
    wv = _augment(p[lkey(layer, "wv")], p[lkey(layer, "bv")])
    wo = np.asarray(p[lkey(layer, "wo")], np.float64)
    out = []
    for i in range(h):
        av, ao = wv[i * vh:(i + 1) * vh], wo[:, i * vh:(i + 1) * vh]
        if mode == "product":
            f = svd(av.T @ ao.T)
            sig = f.sigma[:vh]

            def rebuild(r, f=f, sig=sig):
                root = np.sqrt(sig[:r])
                return (f.u[:, :r] * root).T, f.vt[:r].T * root
        else:
            f = svd(np.concatenate([av, ao.T], axis=1))
            sig = f.sigma[:vh]

            def rebuild(r, f=f, av=av, ao=ao):
                ur = f.u[:, :r]
                return ur.T @ av, ao @ ur
        out.append((sig ** 2, rebuild))
    return out


def _resolve_rank(energies, rho, rank, width, what, layer, notes):
    r = uniform_rank(energies, rho) if rank is None else int(rank)
    if r < 1:
        if notes is not None:
            notes.append(f"{what}: layer {layer} clamped to one dimension per head (rho={rho:.3f})")
        r = 1
    return min(r, width)


def energy_share(energies, r: int) -> float:
    """Fraction of the pooled energy kept by rank ``r`` in every head."""
    total = float(sum(e.sum() for e in energies))
    return 1.0 if total <= 0 else float(sum(e[:r].sum() for e in energies)) / total


def _apply_qk(model, layer, factors, r):
    cfg = model.config
    h, q, d = cfg.heads[layer], cfg.qk_sizes[layer], cfg.embed_dim
    new_q = h * r
    scale = math.sqrt(new_q / q)
    wq, wk = [], []
    for _, rebuild in factors:
        a, b = rebuild(r, scale)
        wq.append(a)
        wk.append(b)
    wq, wk = np.concatenate(wq), np.concatenate(wk)
    out = model.copy()
    dt = model.params[lkey(layer, "wq")].dtype
    out.params[lkey(layer, "wq")] = wq[:, :d].astype(dt)
    out.params[lkey(layer, "bq")] = wq[:, d].astype(dt)
    out.params[lkey(layer, "wk")] = wk[:, :d].astype(dt)
    out.params[lkey(layer, "bk")] = wk[:, d].astype(dt)
    out.config.qk_sizes[layer] = new_q
    out.validate()
    return out


def _apply_v(model, layer, factors, r):
    cfg = model.config
    d = cfg.embed_dim
    wv, wo = [], []
    for _, rebuild in factors:
        a, b = rebuild(r)
        wv.append(a)
        wo.append(b)
    wv, wo = np.concatenate(wv), np.concatenate(wo, axis=1)
    out = model.copy()
    dt = model.params[lkey(layer, "wv")].dtype
    out.params[lkey(layer, "wv")] = wv[:, :d].astype(dt)
    out.params[lkey(layer, "bv")] = wv[:, d].astype(dt)
    out.params[lkey(layer, "wo")] = wo.astype(dt)
    out.config.v_sizes[layer] = cfg.heads[layer] * r
    out.validate()
    return out


def _svd_step(model, layer, which, rho, svd_mode, rank=None, retained=1.0, notes=None):
    """Shared q/v path; returns ``(model, share of current energy kept)``."""
    cfg = model.config
    if which == "qk":
        factors, width, apply = _qk_factors(model, layer, svd_mode), cfg.qk_head_dim(layer), _apply_qk
    else:
        factors, width, apply = _v_factors(model, layer, svd_mode), cfg.v_head_dim(layer), _apply_v
    energies = [e for e, _ in factors]
    target = rho / retained if retained > 0 else rho
    r = _resolve_rank(energies, target, rank, width, which, layer, notes)
    return apply(model, layer, factors, r), energy_share(energies, r)


def svd_prune_qk(model: VitModel, layer: int, rho_qkv: float = 1.0, svd_mode: str = "product",
                 rank: int | None = None, notes: list | None = None,
                 retained: float = 1.0) -> VitModel:
    """Shrink layer ``layer``'s query-key size by truncated SVD.

    All heads keep the same rank r, the smallest reaching an energy share of
    ``rho_qkv``, so ``q' = H * r``. Queries are rescaled by ``sqrt(q'/q)`` to
    keep the attention logits on the same scale. ``rank`` overrides the
    energy rule. ``retained`` is the share of some reference energy the
    current weights already hold; the threshold is then measured against
    that reference rather than the current spectrum.
    """
    return _svd_step(model, layer, "qk", rho_qkv, svd_mode, rank, retained, notes)[0]


def svd_prune_v(model: VitModel, layer: int, rho_qkv: float = 1.0, svd_mode: str = "product",
                rank: int | None = None, notes: list | None = None,
                retained: float = 1.0) -> VitModel:
    """Shrink the value size by truncated SVD of each head's ``W_V^T W_O^T``.

    No rescaling is needed; ``b_O`` is outside the product and left alone.
    """
    return _svd_step(model, layer, "v", rho_qkv, svd_mode, rank, retained, notes)[0]


def qk_energy_spectrum(model: VitModel, layer: int, svd_mode: str = "product"):
    return [e for e, _ in _qk_factors(model, layer, svd_mode)]


def v_energy_spectrum(model: VitModel, layer: int, svd_mode: str = "product"):
    return [e for e, _ in _v_factors(model, layer, svd_mode)]


# ------------------------------------------------------- score-based q / v (ablation)


def _per_head_top(scores, heads, width, r):
    keep = []
    for h in range(heads):
        block = scores[h * width:(h + 1) * width]
        order = np.lexsort((np.arange(width), -block))
        keep.extend(sorted(h * width + int(j) for j in order[:r]))
    return np.asarray(keep, dtype=np.int64)


def score_prune_qk(model: VitModel, layer: int, scores: ImportanceMap, rank: int) -> VitModel:
    """Keep the ``rank`` highest-scoring query-key rows of every head.

    Queries get the same ``sqrt(q'/q)`` factor as the SVD path so removal
    matches zeroing the pruned rows.
    """
    cfg = model.config
    h, q, qh = cfg.heads[layer], cfg.qk_sizes[layer], cfg.qk_head_dim(layer)
    s = scores.layer_scores(layer)
    keep = _per_head_top(s, h, qh, rank)
    return keep_qk_indices(model, layer, keep, scale=math.sqrt(len(keep) / q))


def score_prune_v(model: VitModel, layer: int, scores: ImportanceMap, rank: int) -> VitModel:
    cfg = model.config
    h, vh = cfg.heads[layer], cfg.v_head_dim(layer)
    keep = _per_head_top(scores.layer_scores(layer), h, vh, rank)
    return keep_v_indices(model, layer, keep)


# ------------------------------------------------------------- expansion, embedding


def _expansion_step(model, neuron_scores, rho_exp):
    cfg = model.config
    lookup = neuron_scores.as_dict()
    cand = [(l, i) for l in range(1, cfg.depth) for i in range(cfg.expansion_sizes[l])]
    missing = [k for k in cand if k not in lookup]
    if missing:
        raise ValueError(f"neuron scores missing for {missing[:3]}...")
    if not cand:
        return model.copy(), 1.0
    scores = np.array([lookup[k] for k in cand])
    kept = minimal_prefix(scores, rho_exp)
    total = float(scores.sum())
    share = float(scores[kept].sum()) / total if total > 0 else 1.0
    keep = {l: [] for l in range(1, cfg.depth)}
    for j in kept:
        l, i = cand[j]
        keep[l].append(i)
    out = model
    for l in range(1, cfg.depth):
        if len(keep[l]) < cfg.expansion_sizes[l]:
            out = keep_neurons(out, l, keep[l])
    return (out if out is not model else model.copy()), share


def prune_expansion(model: VitModel, neuron_scores: ImportanceMap, rho_exp: float) -> VitModel:
    """Global minimal-prefix neuron pruning; the first layer's MLP is never pruned."""
    return _expansion_step(model, neuron_scores, rho_exp)[0]


def embed_keep_set(scores, rho_emb: float, total: float | None = None) -> list[int]:
    kept = minimal_prefix(scores, rho_emb, total)
    if kept.size == 0:
        kept = minimal_prefix(scores, 1.0)[:1]
    return sorted(int(j) for j in kept)


def prune_embedding(model: VitModel, embed_scores: ImportanceMap, rho_emb: float,
                    total: float | None = None, notes: list | None = None) -> VitModel:
    """Keep the minimal top set of embedding dimensions reaching ``rho_emb``.

    ``embed_scores`` is indexed by the model's current dimensions. ``total``
    sets the reference mass (defaults to the sum of the given scores).
    """
    if len(embed_scores.scores) != model.config.embed_dim:
        raise ValueError("embedding scores must cover every dimension")
    kept = minimal_prefix(embed_scores.scores, rho_emb, total)
    if kept.size == 0:
        if notes is not None:
            notes.append(f"embedding: rho={rho_emb:.3f} would remove every dimension; kept one")
    dims = embed_keep_set(embed_scores.scores, rho_emb, total)
    if len(dims) == model.config.embed_dim:
        return model.copy()
    return keep_embed_dims(model, dims)


# ----------------------------------------------------------------------- main loop


def _snapshot(model, k, state, base_value, metric):
    cfg = model.config
    value = budget_mod.metric_value(cfg, metric)
    return {
        "k": k,
        "rho_qkv": state.rho_qkv if state else 1.0,
        "rho_exp": state.rho_exp if state else 1.0,
        "rho_emb": state.rho_emb if state else 1.0,
        "q": list(cfg.qk_sizes),
        "v": list(cfg.v_sizes),
        "e": list(cfg.expansion_sizes),
        "d": cfg.embed_dim,
        "budget": value,
        "budget_fraction": value / base_value,
    }


def run_adaptive(model: VitModel, train_split, config: PruneConfig, base_budget: int,
                 embed_scores: ImportanceMap, notes: list | None = None):
    """Iterate q -> v -> e -> d pruning under decaying thresholds.

    ``train_split`` is ``(images, labels)`` of the sub-task, used to re-score
    neurons each iteration. ``embed_scores`` covers the model's current
    embedding dimensions and is computed once by the caller. Stops as soon as
    the budget fraction reaches ``1 - alpha``; raises
    :class:`UnreachableTarget` if the thresholds run out first.

    Returns ``(model, report)``.
    """
    notes = [] if notes is None else notes
    target = 1.0 - config.alpha
    metric = config.metric
    frac = lambda m: budget_mod.metric_value(m.config, metric) / base_budget  # noqa: E731
    history = [_snapshot(model, 0, None, base_budget, metric)]
    report = {"iterations": history, "reached": False, "notes": notes}
    if frac(model) <= target:
        report["reached"] = True
        return model.copy(), report

    dims = list(range(model.config.embed_dim))
    emb_lookup = embed_scores.scores.copy()
    emb_total = float(emb_lookup.sum())
    # share of the loop's starting energy / score mass still held, so every
    # threshold is a floor relative to the model the loop started from
    qk_kept = [1.0] * model.config.depth
    v_kept = [1.0] * model.config.depth
    exp_kept = 1.0
    images, labels = train_split
    cur = model
    for k in range(1, config.max_iterations + 1):
        state = DecayState(k, config.gamma_qkv, config.gamma_exp, config.gamma_emb, config.decay)

        for l in range(cur.config.depth):
            cur, share = _svd_step(cur, l, "qk", state.rho_qkv, config.svd_mode,
                                   retained=qk_kept[l], notes=notes)
            qk_kept[l] *= share
        done = frac(cur) <= target
        if not done:
            for l in range(cur.config.depth):
                cur, share = _svd_step(cur, l, "v", state.rho_qkv, config.svd_mode,
                                       retained=v_kept[l], notes=notes)
                v_kept[l] *= share
            done = frac(cur) <= target
        if not done and cur.config.depth > 1 and sum(cur.config.expansion_sizes[1:]) > 0:
            ns = score_groups(cur, batches(images, labels, config.score_batch_size), "neuron")
            rho = min(1.0, state.rho_exp / exp_kept) if exp_kept > 0 else 0.0
            cur, share = _expansion_step(cur, ns, rho)
            exp_kept *= share
            done = frac(cur) <= target
        if not done:
            kept = embed_keep_set(emb_lookup[dims], state.rho_emb, emb_total)
            if len(kept) < len(dims):
                cur = keep_embed_dims(cur, kept)
                dims = [dims[j] for j in kept]
            done = frac(cur) <= target

        history.append(_snapshot(cur, k, state, base_budget, metric))
        log.info("iteration %d: budget fraction %.4f", k, history[-1]["budget_fraction"])
        if done:
            report["reached"] = True
            report["embed_dims_kept"] = dims
            return cur, report
        if state.exhausted:
            break

    report["embed_dims_kept"] = dims
    raise UnreachableTarget(
        f"pruning rate {config.alpha} not reachable; best fraction {frac(cur):.4f}",
        best_rate=1.0 - frac(cur), model=cur, report=report)


def rate_rank(width: int, rate: float) -> int:
    """Per-head width left after removing a fraction ``rate`` (round half up, >= 1)."""
    if not 0 <= rate < 1:
        raise ValueError("rate must lie in [0, 1)")
    return max(1, int(math.floor((1.0 - rate) * width + 0.5)))


def prune_dimension_at_rate(model: VitModel, which: str, rate: float, method: str = "svd",
                            scores: ImportanceMap | None = None,
                            svd_mode: str = "product") -> VitModel:
    """Cut query-key (``which="qk"``) or value (``"v"``) size by ``rate`` in every layer.

    ``method="svd"`` uses the truncated factorisation; ``method="score"`` keeps
    the highest Taylor-scored rows of each head (``scores`` of kind
    ``qk_index``/``v_index``). Used to compare the two at equal size.
    """
    if which not in ("qk", "v"):
        raise ValueError("which must be 'qk' or 'v'")
    if method == "score":
        want = f"{which}_index"
        if scores is None or scores.kind != want:
            raise ValueError(f"score-based pruning needs {want} scores")
    elif method != "svd":
        raise ValueError("method must be 'svd' or 'score'")
    out = model
    for l in range(model.config.depth):
        cfg = out.config
        width = cfg.qk_head_dim(l) if which == "qk" else cfg.v_head_dim(l)
        r = rate_rank(width, rate)
        if method == "svd":
            out = _svd_step(out, l, which, 1.0, svd_mode, rank=r)[0]
        elif which == "qk":
            out = score_prune_qk(out, l, scores, r)
        else:
            out = score_prune_v(out, l, scores, r)
    return out

"""Independent reference implementations used as test oracles.

Nothing here imports the package's numeric code: forward passes are written
with scalar loops over Python floats and the ``math`` module.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def _ln(row, gamma, beta, eps):
    n = len(row)
    mu = sum(row) / n
    var = sum((r - mu) ** 2 for r in row) / n
    inv = 1.0 / math.sqrt(var + eps)
    return [(row[j] - mu) * inv * gamma[j] + beta[j] for j in range(n)]


def _affine(w, b, x):
    return [sum(w[i][j] * x[j] for j in range(len(x))) + b[i] for i in range(len(w))]


def _gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def _forward_tokens(P, cfg, image, depth):
    """Token list (one list of floats per token) after ``depth`` blocks."""
    p, s = cfg["patch_size"], cfg["image_size"]
    g = s // p
    d = cfg["embed_dim"]
    eps = cfg["layernorm_eps"]
    img = np.asarray(image, dtype=np.float64).tolist()
    tokens = [[P["cls_token"][j] + P["pos_embed"][0][j] for j in range(d)]]
    for gi in range(g):
        for gj in range(g):
            # patches row-major, each flattened channel, row, column
            vec = [img[c][gi * p + i][gj * p + j] for c in range(3) for i in range(p)
                   for j in range(p)]
            emb = _affine(P["patch_embed.weight"], P["patch_embed.bias"], vec)
            pos = P["pos_embed"][1 + gi * g + gj]
            tokens.append([emb[j] + pos[j] for j in range(d)])
    t = len(tokens)
    for l in range(depth):
        pre = f"layers.{l}."
        h = cfg["heads"][l]
        qh = cfg["qk_sizes"][l] // h
        vh = cfg["v_sizes"][l] // h
        a = [_ln(x, P[pre + "ln1.gamma"], P[pre + "ln1.beta"], eps) for x in tokens]
        q = [_affine(P[pre + "attn.wq"], P[pre + "attn.bq"], r) for r in a]
        k = [_affine(P[pre + "attn.wk"], P[pre + "attn.bk"], r) for r in a]
        v = [_affine(P[pre + "attn.wv"], P[pre + "attn.bv"], r) for r in a]
        concat = [[0.0] * (h * vh) for _ in range(t)]
        for hh in range(h):
            for i in range(t):
                logits = [sum(q[i][hh * qh + c] * k[j][hh * qh + c] for c in range(qh))
                          / math.sqrt(qh) for j in range(t)]
                m = max(logits)
                ex = [math.exp(z - m) for z in logits]
                tot = sum(ex)
                for c in range(vh):
                    concat[i][hh * vh + c] = sum(ex[j] / tot * v[j][hh * vh + c] for j in range(t))
        out = [_affine(P[pre + "attn.wo"], P[pre + "attn.bo"], r) for r in concat]
        tokens = [[tokens[i][j] + out[i][j] for j in range(d)] for i in range(t)]
        b = [_ln(x, P[pre + "ln2.gamma"], P[pre + "ln2.beta"], eps) for x in tokens]
        new = []
        for i in range(t):
            hid = [_gelu(z) for z in _affine(P[pre + "mlp.w1"], P[pre + "mlp.b1"], b[i])]
            mlp = [sum(P[pre + "mlp.w2"][r][c] * hid[c] for c in range(len(hid)))
                   + P[pre + "mlp.b2"][r] for r in range(d)]
            new.append([tokens[i][j] + mlp[j] for j in range(d)])
        tokens = new
    return tokens


def _as_lists(params):
    return {k: np.asarray(v, dtype=np.float64).tolist() for k, v in params.items()}


def config_dict(cfg) -> dict:
    return {"image_size": cfg.image_size, "patch_size": cfg.patch_size,
            "embed_dim": cfg.embed_dim, "num_classes": cfg.num_classes,
            "heads": list(cfg.heads), "qk_sizes": list(cfg.qk_sizes),
            "v_sizes": list(cfg.v_sizes), "expansion_sizes": list(cfg.expansion_sizes),
            "layernorm_eps": cfg.layernorm_eps}


def scalar_forward(params: dict, cfg: dict, image, depth=None, probe=None):
    """Straight-line ViT forward pass for one image; returns the logit list.

    ``probe`` is an optional (gamma, beta, weight, bias) tuple replacing the head.
    """
    P = _as_lists(params)
    depth = len(cfg["heads"]) if depth is None else depth
    tokens = _forward_tokens(P, cfg, image, depth)
    if probe is None:
        probe = (P["head.ln.gamma"], P["head.ln.beta"], P["head.weight"], P["head.bias"])
    hg, hb, hw, hbias = (np.asarray(x, np.float64).tolist() for x in probe)
    feat = _ln(tokens[0], hg, hb, cfg["layernorm_eps"])
    return _affine(hw, hbias, feat)


def scalar_neuron_activation(params, cfg, image, layer, neuron):
    """GELU(LN2(x_cls) . w1[neuron] + b1[neuron]) inside block ``layer``."""
    P = _as_lists(params)
    pre = f"layers.{layer}."
    # with this block's MLP output zeroed, its output is the post-attention stream
    d = cfg["embed_dim"]
    P[pre + "mlp.w2"] = [[0.0] * len(P[pre + "mlp.b1"]) for _ in range(d)]
    P[pre + "mlp.b2"] = [0.0] * d
    cls = _forward_tokens(P, cfg, image, layer + 1)[0]
    bn = _ln(cls, P[pre + "ln2.gamma"], P[pre + "ln2.beta"], cfg["layernorm_eps"])
    z = sum(P[pre + "mlp.w1"][neuron][j] * bn[j] for j in range(d)) + P[pre + "mlp.b1"][neuron]
    return _gelu(z)


# ------------------------------------------------------------------ set oracles


def brute_force_minimal_set(scores, rho, total=None):
    """Smallest-cardinality index set with share >= rho, searched exhaustively.

    Among sets of the minimal size the one with the largest score sum wins,
    ties broken by the lexicographically smallest (rank-ordered) index tuple.
    Only for short vectors.
    """
    scores = [float(s) for s in scores]
    n = len(scores)
    total = sum(scores) if total is None else total
    if rho <= 0:
        return set()
    if total <= 0:
        return set(range(n))
    for size in range(0, n + 1):
        best = None
        for combo in itertools.combinations(range(n), size):
            mass = sum(scores[i] for i in combo)
            if mass / total >= rho:
                key = (-mass, sorted(combo))
                if best is None or key < best[0]:
                    best = (key, set(combo))
        if best is not None:
            return best[1]
    return set(range(n))


def prefix_scan(scores, rho, total=None):
    """Sort descending (stable by index) and take the shortest prefix reaching rho."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    total = sum(scores) if total is None else total
    if rho <= 0:
        return []
    if total <= 0:
        return order
    acc = 0.0
    for m, i in enumerate(order, start=1):
        acc += scores[i]
        if acc / total >= rho:
            return order[:m]
    return order


# --------------------------------------------------------------- budget oracle


def budget_terms(cfg: dict):
    """Per-module parameter/FLOP terms, enumerated one component at a time."""
    p, d, n, c = cfg["patch_size"], cfg["embed_dim"], (cfg["image_size"] // cfg["patch_size"]) ** 2, \
        cfg["num_classes"]
    params = {"patch_embed": 3 * p * p * d, "cls_and_pos": (n + 1) * d, "head_ln": 2 * d,
              "classifier": c * d}
    flops = {"patch_embed": 3 * (n - 1) * p * p * d, "classifier": c * d, "head_ln": d}
    for l, (q, v, e) in enumerate(zip(cfg["qk_sizes"], cfg["v_sizes"], cfg["expansion_sizes"])):
        params[f"l{l}.qk"] = 2 * q * d
        params[f"l{l}.v"] = v * d
        params[f"l{l}.o"] = v * d
        params[f"l{l}.mlp"] = 2 * e * d
        params[f"l{l}.ln"] = 4 * d
        flops[f"l{l}.qk_proj"] = 2 * n * d * q
        flops[f"l{l}.scores"] = n * n * q
        flops[f"l{l}.v_proj"] = 2 * n * d * v
        flops[f"l{l}.mix"] = n * n * v
        flops[f"l{l}.mlp"] = 2 * n * d * e
        flops[f"l{l}.ln"] = 2 * n * d
    return params, flops


def omitted_tensor_count(cfg: dict) -> int:
    """Stored elements that the closed-form parameter count leaves out."""
    d = cfg["embed_dim"]
    count = d  # patch-embedding bias
    count += d  # the separate cls vector (positions cover N+1 rows already)
    for q, v, e in zip(cfg["qk_sizes"], cfg["v_sizes"], cfg["expansion_sizes"]):
        count += q + q + v + d  # bq, bk, bv, bo
        count += e + d  # b1, b2
    count += cfg["num_classes"]  # classifier bias
    return count


# ------------------------------------------------------------------- optimizer


def scalar_adamw(w, grads_seq, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    w = list(w)
    m = [0.0] * len(w)
    v = [0.0] * len(w)
    for t, g in enumerate(grads_seq, start=1):
        for i in range(len(w)):
            w[i] = w[i] * (1 - lr * wd)
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            w[i] = w[i] - lr * mh / (math.sqrt(vh) + eps)
    return w


# ---------------------------------------------------------------- svd oracle


def energy_prefix_rank(per_head_sigmas, rho):
    """Smallest uniform per-head rank whose pooled squared-sigma share reaches rho."""
    total = sum(float(s) ** 2 for sig in per_head_sigmas for s in sig)
    width = len(per_head_sigmas[0])
    for r in range(1, width + 1):
        kept = sum(float(s) ** 2 for sig in per_head_sigmas for s in sig[:r])
        if kept / total >= rho:
            return r
    return width

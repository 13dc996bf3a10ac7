"""Reverse-mode gradients of the cross-entropy loss w.r.t. every weight.

The backward pass is hand-written for this one architecture. It can reduce
over the batch (mean loss) or keep a leading per-sample axis, which the
Taylor importance scores need.
"""

from __future__ import annotations

import math

import numpy as np

from . import linalg
from .model import ATTN_KEYS, MLP_KEYS, Probe, VitModel, lkey, run


def _check_labels(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return labels


def cross_entropy(logits, labels):
    """Per-sample ``-log softmax(logits)[label]`` and the softmax itself."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    losses = lse - z[np.arange(len(labels)), labels]
    probs = np.exp(z - lse[:, None])
    return losses, probs


def _wgrad(dy, x, per_sample):
    # dy (B, T, o), x (B, T, i)
    if per_sample:
        return dy.transpose(0, 2, 1) @ x
    rows = dy.shape[0] * dy.shape[1]
    return dy.reshape(rows, dy.shape[-1]).T @ x.reshape(rows, x.shape[-1])


def _bgrad(dy, per_sample):
    if per_sample:
        return dy.sum(axis=1)
    return dy.reshape(dy.shape[0] * dy.shape[1], dy.shape[-1]).sum(axis=0)


def _tsum(t, per_sample):
    """Sum a (B, T, d) tensor over tokens (and over the batch unless per_sample)."""
    return t.sum(axis=1) if per_sample else t.sum(axis=(0, 1))


def backprop(model: VitModel, cache, dlogits, per_sample=False) -> dict[str, np.ndarray]:
    """Push ``dlogits`` back through a cached forward pass.

    Returns a gradient for every tensor in ``model.params`` (zeros for layers
    beyond the cached depth). With ``per_sample`` each gradient has a leading
    batch axis and no reduction over samples is done.
    """
    cfg = model.config
    p = model.params
    bsz = dlogits.shape[0]
    f64 = lambda name: np.asarray(p[name], dtype=np.float64)  # noqa: E731
    grads: dict[str, np.ndarray] = {}
    lead = (bsz,) if per_sample else ()
    for name, t in p.items():
        grads[name] = np.zeros(lead + t.shape)

    head: Probe = cache["head"]
    hw = np.asarray(head.weight, np.float64)
    fn = cache["head_in"]
    if per_sample:
        grads["head.weight"] = dlogits[:, :, None] * fn[:, None, :]
        grads["head.bias"] = dlogits.copy()
    else:
        grads["head.weight"] = dlogits.T @ fn
        grads["head.bias"] = dlogits.sum(axis=0)
    dfn = dlogits @ hw
    hg = np.asarray(head.ln_gamma, np.float64)
    dgam = dfn * cache["xhh"]
    grads["head.ln.gamma"] = dgam if per_sample else dgam.sum(axis=0)
    grads["head.ln.beta"] = dfn.copy() if per_sample else dfn.sum(axis=0)
    dfeat = linalg.layernorm_backward(dfn, cache["xhh"], cache["rsh"], hg)

    t_len = cfg.num_patches + 1
    dx = np.zeros((bsz, t_len, cfg.embed_dim))
    dx[:, 0] = dfeat

    for l in reversed(range(cache["depth"])):
        c = cache["layers"][l]
        h, qh, vh = cfg.heads[l], cfg.qk_head_dim(l), cfg.v_head_dim(l)
        w = {k: f64(lkey(l, k)) for k in ATTN_KEYS + MLP_KEYS}

        # MLP block; dx is the gradient at x2 == x1 + mlp(x1)
        grads[lkey(l, "w2")] = _wgrad(dx, c["hact"], per_sample)
        grads[lkey(l, "b2")] = _bgrad(dx, per_sample)
        dh = (dx @ w["w2"]) * linalg.gelu_grad(c["hpre"])
        grads[lkey(l, "w1")] = _wgrad(dh, c["bn"], per_sample)
        grads[lkey(l, "b1")] = _bgrad(dh, per_sample)
        dbn = dh @ w["w1"]
        grads[lkey(l, "ln2.gamma")] = _tsum(dbn * c["xh2"], per_sample)
        grads[lkey(l, "ln2.beta")] = _tsum(dbn, per_sample)
        dx = dx + linalg.layernorm_backward(dbn, c["xh2"], c["rs2"], f64(lkey(l, "ln2.gamma")))

        # attention block; dx is now the gradient at x1 == x + attn(x)
        grads[lkey(l, "wo")] = _wgrad(dx, c["o"], per_sample)
        grads[lkey(l, "bo")] = _bgrad(dx, per_sample)
        do = (dx @ w["wo"]).reshape(bsz, t_len, h, vh).transpose(0, 2, 1, 3)
        prob, q, k, v = c["prob"], c["q"], c["k"], c["v"]
        dprob = do @ v.transpose(0, 1, 3, 2)
        dv = prob.transpose(0, 1, 3, 2) @ do
        ds = prob * (dprob - (dprob * prob).sum(axis=-1, keepdims=True))
        scale = 1.0 / math.sqrt(qh)
        dq = (ds @ k) * scale
        dk = (ds.transpose(0, 1, 3, 2) @ q) * scale
        merge = lambda t, width: t.transpose(0, 2, 1, 3).reshape(bsz, t_len, h * width)  # noqa: E731
        dq, dk, dv = merge(dq, qh), merge(dk, qh), merge(dv, vh)
        a = c["a"]
        grads[lkey(l, "wq")] = _wgrad(dq, a, per_sample)
        grads[lkey(l, "bq")] = _bgrad(dq, per_sample)
        grads[lkey(l, "wk")] = _wgrad(dk, a, per_sample)
        grads[lkey(l, "bk")] = _bgrad(dk, per_sample)
        grads[lkey(l, "wv")] = _wgrad(dv, a, per_sample)
        grads[lkey(l, "bv")] = _bgrad(dv, per_sample)
        da = dq @ w["wq"] + dk @ w["wk"] + dv @ w["wv"]
        grads[lkey(l, "ln1.gamma")] = _tsum(da * c["xh1"], per_sample)
        grads[lkey(l, "ln1.beta")] = _tsum(da, per_sample)
        dx = dx + linalg.layernorm_backward(da, c["xh1"], c["rs1"], f64(lkey(l, "ln1.gamma")))

    grads["pos_embed"] = dx.copy() if per_sample else dx.sum(axis=0)
    grads["cls_token"] = dx[:, 0].copy() if per_sample else dx[:, 0].sum(axis=0)
    dtok = dx[:, 1:]
    grads["patch_embed.weight"] = _wgrad(dtok, cache["patches"], per_sample)
    grads["patch_embed.bias"] = _bgrad(dtok, per_sample)
    return grads


def loss(model: VitModel, images, labels, depth_limit=None, probe=None) -> float:
    labels = _check_labels(labels, model.config.num_classes if probe is None
                           else np.shape(probe.weight)[0])
    logits, _ = run(model, images, depth=depth_limit, head=probe)
    return float(cross_entropy(logits, labels)[0].mean())


def backward(model: VitModel, images, labels, depth_limit=None, probe=None):
    """Mean cross-entropy and its exact gradient w.r.t. every model tensor.

    Returns ``(loss, grads)``; ``grads`` mirrors ``model.params`` in shape.
    ``depth_limit``/``probe`` select the truncated network of
    :func:`edgevit.model.forward_truncated`; probe weights get no gradient here.
    """
    n_cls = model.config.num_classes if probe is None else np.shape(probe.weight)[0]
    labels = _check_labels(labels, n_cls)
    logits, cache = run(model, images, depth=depth_limit, head=probe, keep_cache=True)
    losses, probs = cross_entropy(logits, labels)
    dlogits = probs.copy()
    dlogits[np.arange(len(labels)), labels] -= 1.0
    dlogits /= len(labels)
    grads = backprop(model, cache, dlogits)
    if probe is not None:
        for name in ("head.ln.gamma", "head.ln.beta", "head.weight", "head.bias"):
            grads[name] = np.zeros(model.params[name].shape)
    return float(losses.mean()), grads


def per_sample_backward(model: VitModel, images, labels, loss_scale: float = 1.0):
    """Per-sample losses and gradients of each sample's own loss term.

    Every gradient carries a leading batch axis.
    """
    labels = _check_labels(labels, model.config.num_classes)
    logits, cache = run(model, images, keep_cache=True)
    losses, probs = cross_entropy(logits, labels)
    dlogits = probs.copy()
    dlogits[np.arange(len(labels)), labels] -= 1.0
    dlogits *= loss_scale
    return losses * loss_scale, backprop(model, cache, dlogits, per_sample=True)


def finite_diff(model: VitModel, images, labels, tensor_name: str, coordinate, h: float = 1e-3,
                depth_limit=None) -> float:
    """Central difference ``(L(w+h) - L(w-h)) / 2h`` of the mean loss, in float64."""
    if tensor_name not in model.params:
        raise KeyError(f"unknown tensor {tensor_name!r}")
    m64 = model.astype(np.float64)
    t = m64.params[tensor_name]
    coordinate = tuple(np.atleast_1d(coordinate)) if t.ndim else ()
    orig = t[coordinate]
    t[coordinate] = orig + h
    up = loss(m64, images, labels, depth_limit=depth_limit)
    t[coordinate] = orig - h
    down = loss(m64, images, labels, depth_limit=depth_limit)
    t[coordinate] = orig
    return (up - down) / (2.0 * h)


def probe_backward(features, probe: Probe, labels, eps: float):
    """Loss and gradients for a LayerNorm+linear probe on fixed features."""
    feats = np.asarray(features, np.float64)
    g = np.asarray(probe.ln_gamma, np.float64)
    fn, xh, rs = linalg.layernorm(feats, g, probe.ln_beta, eps, return_cache=True)
    logits = fn @ np.asarray(probe.weight, np.float64).T + np.asarray(probe.bias, np.float64)
    labels = _check_labels(labels, logits.shape[1])
    losses, probs = cross_entropy(logits, labels)
    dl = probs
    dl[np.arange(len(labels)), labels] -= 1.0
    dl /= len(labels)
    dfn = dl @ np.asarray(probe.weight, np.float64)
    grads = {
        "ln.gamma": (dfn * xh).sum(axis=0),
        "ln.beta": dfn.sum(axis=0),
        "weight": dl.T @ fn,
        "bias": dl.sum(axis=0),
    }
    return float(losses.mean()), grads

"""Plain-numpy Vision Transformer: configuration, weights and forward pass.

Weights live in a flat ``dict`` keyed by canonical tensor names
(``layers.0.attn.wq`` ...). Storage is float32; the forward pass computes in
float64 so gradients and finite differences agree closely.

Layer and neuron indices are 0-based everywhere in the API.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import DimensionError

ATTN_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
MLP_KEYS = ("w1", "b1", "w2", "b2")


@dataclass
class ModelConfig:
    image_size: int
    patch_size: int
    embed_dim: int
    num_classes: int
    heads: list[int]
    qk_sizes: list[int]
    v_sizes: list[int]
    expansion_sizes: list[int]
    layernorm_eps: float = 1e-6

    @classmethod
    def uniform(cls, image_size, patch_size, depth, embed_dim, heads, qk, v, expansion,
                num_classes, layernorm_eps=1e-6):
        return cls(image_size, patch_size, embed_dim, num_classes, [heads] * depth,
                   [qk] * depth, [v] * depth, [expansion] * depth, layernorm_eps)

    @property
    def depth(self) -> int:
        return len(self.heads)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size ** 2

    def qk_head_dim(self, layer: int) -> int:
        return self.qk_sizes[layer] // self.heads[layer]

    def v_head_dim(self, layer: int) -> int:
        return self.v_sizes[layer] // self.heads[layer]

    def validate(self) -> None:
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise DimensionError("image_size must be divisible by patch_size")
        if self.depth < 1 or self.embed_dim < 1 or self.num_classes < 1:
            raise DimensionError("depth, embed_dim and num_classes must be >= 1")
        per_layer = (self.qk_sizes, self.v_sizes, self.expansion_sizes)
        if any(len(x) != self.depth for x in per_layer):
            raise DimensionError("per-layer size lists must all have length depth")
        for l, (h, q, v, e) in enumerate(zip(self.heads, *per_layer)):
            if h < 1:
                raise DimensionError(f"layer {l}: needs at least one head")
            if q % h or v % h:
                raise DimensionError(f"layer {l}: q={q}, v={v} not divisible by H={h}")
            if q < h or v < h or e < 0:
                raise DimensionError(f"layer {l}: per-head widths must be >= 1")

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "num_classes": self.num_classes,
            "depth": self.depth,
            "heads": list(self.heads),
            "qk_sizes": list(self.qk_sizes),
            "v_sizes": list(self.v_sizes),
            "expansion_sizes": list(self.expansion_sizes),
            "layernorm_eps": self.layernorm_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(
            image_size=int(d["image_size"]),
            patch_size=int(d["patch_size"]),
            embed_dim=int(d["embed_dim"]),
            num_classes=int(d["num_classes"]),
            heads=[int(x) for x in d["heads"]],
            qk_sizes=[int(x) for x in d["qk_sizes"]],
            v_sizes=[int(x) for x in d["v_sizes"]],
            expansion_sizes=[int(x) for x in d["expansion_sizes"]],
            layernorm_eps=float(d["layernorm_eps"]),
        )
        if "depth" in d and int(d["depth"]) != cfg.depth:
            raise DimensionError("depth disagrees with per-layer lists")
        return cfg


def lkey(layer: int, name: str) -> str:
    """Canonical tensor name for a per-layer weight, e.g. ``lkey(0, "wq")``."""
    if name in ATTN_KEYS:
        return f"layers.{layer}.attn.{name}"
    if name in MLP_KEYS:
        return f"layers.{layer}.mlp.{name}"
    if name in ("ln1.gamma", "ln1.beta", "ln2.gamma", "ln2.beta"):
        return f"layers.{layer}.{name}"
    raise KeyError(name)


def tensor_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Shapes of every model tensor, in canonical container order."""
    d, n = cfg.embed_dim, cfg.num_patches
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (d, cfg.patch_dim),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (n + 1, d),
    }
    for l in range(cfg.depth):
        q, v, e = cfg.qk_sizes[l], cfg.v_sizes[l], cfg.expansion_sizes[l]
        shapes[f"layers.{l}.ln1.gamma"] = (d,)
        shapes[f"layers.{l}.ln1.beta"] = (d,)
        shapes[f"layers.{l}.attn.wq"] = (q, d)
        shapes[f"layers.{l}.attn.bq"] = (q,)
        shapes[f"layers.{l}.attn.wk"] = (q, d)
        shapes[f"layers.{l}.attn.bk"] = (q,)
        shapes[f"layers.{l}.attn.wv"] = (v, d)
        shapes[f"layers.{l}.attn.bv"] = (v,)
        shapes[f"layers.{l}.attn.wo"] = (d, v)
        shapes[f"layers.{l}.attn.bo"] = (d,)
        shapes[f"layers.{l}.ln2.gamma"] = (d,)
        shapes[f"layers.{l}.ln2.beta"] = (d,)
        shapes[f"layers.{l}.mlp.w1"] = (e, d)
        shapes[f"layers.{l}.mlp.b1"] = (e,)
        shapes[f"layers.{l}.mlp.w2"] = (d, e)
        shapes[f"layers.{l}.mlp.b2"] = (d,)
    shapes["head.ln.gamma"] = (d,)
    shapes["head.ln.beta"] = (d,)
    shapes["head.weight"] = (cfg.num_classes, d)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


@dataclass
class Probe:
    """LayerNorm + linear classifier on the cls token."""

    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    weight: np.ndarray
    bias: np.ndarray

    def copy(self) -> "Probe":
        return Probe(*(np.array(t, copy=True) for t in
                       (self.ln_gamma, self.ln_beta, self.weight, self.bias)))

    def tensors(self) -> dict[str, np.ndarray]:
        return {"ln.gamma": self.ln_gamma, "ln.beta": self.ln_beta,
                "weight": self.weight, "bias": self.bias}


@dataclass
class VitModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    class_ids: list[int]
    aux: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        self.config.validate()
        expected = tensor_shapes(self.config)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise DimensionError(f"tensor set mismatch; missing={missing} extra={extra}")
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != shape:
                raise DimensionError(f"{name}: shape {self.params[name].shape} != {shape}")
        if len(self.class_ids) != self.config.num_classes:
            raise DimensionError("class_ids length must equal num_classes")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise DimensionError("class_ids contains duplicates")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def ordered_params(self):
        for name in tensor_shapes(self.config):
            yield name, self.params[name]

    def copy(self) -> "VitModel":
        return VitModel(copy.deepcopy(self.config),
                        {k: v.copy() for k, v in self.params.items()},
                        list(self.class_ids),
                        {k: v.copy() for k, v in self.aux.items()})

    def astype(self, dtype) -> "VitModel":
        out = self.copy()
        out.params = {k: v.astype(dtype) for k, v in out.params.items()}
        return out

    @property
    def head(self) -> Probe:
        p = self.params
        return Probe(p["head.ln.gamma"], p["head.ln.beta"], p["head.weight"], p["head.bias"])

    def set_head(self, probe: Probe, class_ids) -> None:
        dtype = self.params["head.weight"].dtype
        self.params["head.ln.gamma"] = np.asarray(probe.ln_gamma, dtype=dtype).copy()
        self.params["head.ln.beta"] = np.asarray(probe.ln_beta, dtype=dtype).copy()
        self.params["head.weight"] = np.asarray(probe.weight, dtype=dtype).copy()
        self.params["head.bias"] = np.asarray(probe.bias, dtype=dtype).copy()
        self.class_ids = list(class_ids)
        self.config.num_classes = len(self.class_ids)


def init_model(cfg: ModelConfig, seed: int = 0, class_ids=None, weight_std=None,
               bias_std: float = 0.0, embed_std: float = 0.02, dtype=np.float32) -> VitModel:
    """Random initialisation.

    Matrices get ``N(0, weight_std**2)`` (default ``1/sqrt(fan_in)``); biases
    ``N(0, bias_std**2)``; layer norms start at gamma=1, beta=0.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in tensor_shapes(cfg).items():
        if name.endswith(".gamma"):
            t = np.ones(shape)
        elif name.endswith(".beta"):
            t = np.zeros(shape)
        elif name in ("cls_token", "pos_embed"):
            t = rng.normal(0.0, embed_std, shape)
        elif len(shape) == 2:
            std = weight_std if weight_std is not None else 1.0 / math.sqrt(max(shape[1], 1))
            t = rng.normal(0.0, std, shape)
        else:
            t = rng.normal(0.0, bias_std, shape) if bias_std else np.zeros(shape)
        params[name] = t.astype(dtype)
    ids = list(range(cfg.num_classes)) if class_ids is None else list(class_ids)
    return VitModel(copy.deepcopy(cfg), params, ids)


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, 3, S, S) -> (B, N, 3*p*p); patches row-major, each flattened (c, i, j)."""
    b, c, s, _ = images.shape
    g = s // patch_size
    x = images.reshape(b, c, g, patch_size, g, patch_size)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, g * g, c * patch_size * patch_size)


def _check_images(cfg: ModelConfig, images) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1:] != (3, cfg.image_size, cfg.image_size):
        raise DimensionError(
            f"expected images (B, 3, {cfg.image_size}, {cfg.image_size}), got {images.shape}")
    return images


@dataclass
class ActivationTrace:
    tokens: list[np.ndarray]  # per layer, (B, N+1, d) after the encoder block
    attention: list[np.ndarray]  # per layer, (B, H, N+1, N+1)
    hidden: list[np.ndarray]  # per layer, (B, N+1, e) post-GELU
    cls_feature: np.ndarray  # (B, d) before the head layer norm
    logits: np.ndarray


def run(model: VitModel, images, depth=None, head: Probe | None = None, keep_cache=False):
    """Shared forward kernel; returns ``(logits, cache)``.

    ``cache`` is None unless ``keep_cache``; the backward pass consumes it.
    """
    cfg = model.config
    p = model.params
    eps = cfg.layernorm_eps
    depth = cfg.depth if depth is None else depth
    x_img = _check_images(cfg, images)
    f64 = lambda name: np.asarray(p[name], dtype=np.float64)  # noqa: E731

    patches = patchify(x_img, cfg.patch_size)
    bsz = patches.shape[0]
    tok = patches @ f64("patch_embed.weight").T + f64("patch_embed.bias")
    cls = np.broadcast_to(f64("cls_token"), (bsz, 1, cfg.embed_dim))
    x = np.concatenate([cls, tok], axis=1) + f64("pos_embed")
    cache = {"patches": patches, "layers": []} if keep_cache else None

    for l in range(depth):
        h = cfg.heads[l]
        qh, vh = cfg.qk_head_dim(l), cfg.v_head_dim(l)
        w = {k: f64(lkey(l, k)) for k in ATTN_KEYS + MLP_KEYS}
        a, xh1, rs1 = linalg.layernorm(x, f64(lkey(l, "ln1.gamma")), f64(lkey(l, "ln1.beta")),
                                       eps, return_cache=True)
        t = a.shape[1]
        q = (a @ w["wq"].T + w["bq"]).reshape(bsz, t, h, qh).transpose(0, 2, 1, 3)
        k = (a @ w["wk"].T + w["bk"]).reshape(bsz, t, h, qh).transpose(0, 2, 1, 3)
        v = (a @ w["wv"].T + w["bv"]).reshape(bsz, t, h, vh).transpose(0, 2, 1, 3)
        s = (q @ k.transpose(0, 1, 3, 2)) / math.sqrt(qh)
        prob = linalg.softmax_rows(s)
        o = (prob @ v).transpose(0, 2, 1, 3).reshape(bsz, t, h * vh)
        x1 = x + o @ w["wo"].T + w["bo"]
        bn, xh2, rs2 = linalg.layernorm(x1, f64(lkey(l, "ln2.gamma")), f64(lkey(l, "ln2.beta")),
                                        eps, return_cache=True)
        hpre = bn @ w["w1"].T + w["b1"]
        hact = linalg.gelu(hpre)
        x2 = x1 + hact @ w["w2"].T + w["b2"]
        if keep_cache:
            cache["layers"].append(dict(x_in=x, a=a, xh1=xh1, rs1=rs1, q=q, k=k, v=v, prob=prob,
                                        o=o, x1=x1, bn=bn, xh2=xh2, rs2=rs2, hpre=hpre,
                                        hact=hact, x_out=x2))
        x = x2

    head = model.head if head is None else head
    feat = x[:, 0]
    fn, xhh, rsh = linalg.layernorm(feat, np.asarray(head.ln_gamma, np.float64),
                                    np.asarray(head.ln_beta, np.float64), eps, return_cache=True)
    logits = fn @ np.asarray(head.weight, np.float64).T + np.asarray(head.bias, np.float64)
    if keep_cache:
        cache.update(feat=feat, head_in=fn, xhh=xhh, rsh=rsh, depth=depth, head=head)
    return logits, cache


def forward(model: VitModel, images, trace: bool = False):
    """Logits ``(B, C)``; with ``trace=True`` returns ``(logits, ActivationTrace)``."""
    logits, cache = run(model, images, keep_cache=trace)
    if not trace:
        return logits
    return logits, _trace_from_cache(cache, logits)


def _trace_from_cache(cache, logits) -> ActivationTrace:
    layers = cache["layers"]
    return ActivationTrace(
        tokens=[c["x_out"] for c in layers],
        attention=[c["prob"] for c in layers],
        hidden=[c["hact"] for c in layers],
        cls_feature=cache["feat"],
        logits=logits,
    )


def forward_truncated(model: VitModel, images, depth_limit: int, probe: Probe) -> np.ndarray:
    """Run only the first ``depth_limit`` blocks and classify with ``probe``."""
    if not 1 <= depth_limit <= model.config.depth:
        raise ValueError(f"depth_limit {depth_limit} outside 1..{model.config.depth}")
    if np.shape(probe.weight)[1] != model.config.embed_dim:
        raise DimensionError("probe width does not match embed_dim")
    logits, _ = run(model, images, depth=depth_limit, head=probe)
    return logits


def cls_features(model: VitModel, images, depth: int | None = None, all_layers=False):
    """cls-token residual stream after ``depth`` blocks (or after every block)."""
    _, cache = run(model, images, depth=depth, keep_cache=True)
    if all_layers:
        return [c["x_out"][:, 0] for c in cache["layers"]]
    return cache["feat"]


def mlp_cls_activations(model: VitModel, images, layer: int) -> np.ndarray:
    """Post-GELU MLP activations of the cls token at ``layer``: (B, e_layer)."""
    if not 0 <= layer < model.config.depth:
        raise ValueError(f"layer {layer} outside 0..{model.config.depth - 1}")
    _, cache = run(model, images, depth=layer + 1, keep_cache=True)
    return cache["layers"][layer]["hact"][:, 0]


def neuron_activation(model: VitModel, image, layer: int, neuron: int) -> float:
    """GELU activation of MLP neuron ``neuron`` in ``layer`` for the cls token."""
    if not 0 <= layer < model.config.depth:
        raise ValueError(f"layer {layer} outside 0..{model.config.depth - 1}")
    if not 0 <= neuron < model.config.expansion_sizes[layer]:
        raise ValueError(f"neuron {neuron} outside 0..{model.config.expansion_sizes[layer] - 1}")
    return float(mlp_cls_activations(model, image, layer)[0, neuron])


def predict(model: VitModel, images, batch_size: int = 256) -> np.ndarray:
    """Arg-max class index per image; ties resolve to the lowest index."""
    out = []
    for start in range(0, len(images), batch_size):
        out.append(np.argmax(forward(model, images[start:start + batch_size]), axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

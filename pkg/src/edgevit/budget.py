"""Parameter and FLOP budgets.

``params_a2``/``flops_a2`` are the closed-form counts that define the pruning
rate. They leave out biases and fold the cls token into the positional term.
``params_exact`` counts stored elements. The FLOP formula's patch-embedding
term uses ``N - 1`` and is reproduced as written.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import ModelConfig, VitModel


def params_a2(cfg: ModelConfig) -> int:
    p2 = cfg.patch_size ** 2
    per_layer = sum(q + v + e for q, v, e in zip(cfg.qk_sizes, cfg.v_sizes, cfg.expansion_sizes))
    return (3 * p2 + cfg.num_patches + 2 * per_layer + 4 * cfg.depth + cfg.num_classes + 3) \
        * cfg.embed_dim


def flops_a2(cfg: ModelConfig) -> int:
    n, d, p2 = cfg.num_patches, cfg.embed_dim, cfg.patch_size ** 2
    qv = sum(q + v for q, v in zip(cfg.qk_sizes, cfg.v_sizes))
    e = sum(cfg.expansion_sizes)
    return (3 * (n - 1) * p2 + 2 * cfg.depth * n + cfg.num_classes + 1) * d \
        + (2 * n * d + n * n) * qv + 2 * n * d * e


def params_exact(model: VitModel) -> int:
    return int(sum(t.size for t in model.params.values()))


def accounting_delta(cfg: ModelConfig) -> int:
    """``params_exact - params_a2`` for a model with this config.

    The formula omits every bias (patch embed, q/k/v/o, both MLP layers,
    classifier) and counts cls + positions as ``(N+1)d`` although the model
    stores ``N+1`` positional rows plus a separate cls vector.
    """
    d = cfg.embed_dim
    per_layer = sum(2 * q + v + e + 2 * d
                    for q, v, e in zip(cfg.qk_sizes, cfg.v_sizes, cfg.expansion_sizes))
    return d + d + per_layer + cfg.num_classes


def metric_value(cfg: ModelConfig, metric: str) -> int:
    if metric == "params":
        return params_a2(cfg)
    if metric == "flops":
        return flops_a2(cfg)
    raise ValueError(f"unknown metric {metric!r}; expected 'params' or 'flops'")


@dataclass(frozen=True)
class Budget:
    params: int
    flops: int
    accounting: str = "paper-A2"

    @classmethod
    def of(cls, cfg: ModelConfig) -> "Budget":
        return cls(params_a2(cfg), flops_a2(cfg))

    def get(self, metric: str) -> int:
        if metric not in ("params", "flops"):
            raise ValueError(f"unknown metric {metric!r}")
        return self.params if metric == "params" else self.flops


def budget_report(model: VitModel, base: Budget | None = None, metric: str = "params") -> dict:
    b = Budget.of(model.config)
    out = {"params_a2": b.params, "flops_a2": b.flops, "params_exact": params_exact(model)}
    if base is not None:
        out["fraction_of_base"] = b.get(metric) / base.get(metric)
    return out

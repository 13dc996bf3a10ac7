"""Training and recovery fine-tuning with AdamW."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import TrainingDiverged
from .grad import backward
from .model import VitModel, predict

log = logging.getLogger(__name__)


class AdamW:
    """Adam with decoupled weight decay over a dict of float64 arrays.

    Decay is applied first, ``w *= 1 - lr * weight_decay``, then the
    bias-corrected Adam step.
    """

    def __init__(self, params: dict, lr=1e-4, weight_decay=0.05, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** t
        corr2 = 1.0 - b2 ** t
        for name, w in params.items():
            g = grads[name]
            if self.weight_decay:
                w *= 1.0 - self.lr * self.weight_decay
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            w -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


@dataclass
class TrainRun:
    epochs: int = 5
    batch_size: int = 64
    seed: int = 0
    lr: float = 1e-4
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    loss_curve: list = field(default_factory=list)
    eval_curve: list = field(default_factory=list)

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def train(model: VitModel, images, labels, run: TrainRun | None = None, eval_images=None,
          eval_labels=None):
    """Fit ``model`` on ``(images, labels)``; returns ``(trained copy, run)``.

    Labels index the model's classifier rows. The shuffle order depends only on
    ``run.seed``. A non-finite loss raises :class:`TrainingDiverged` carrying
    the weights from the end of the last finite epoch.
    """
    run = TrainRun() if run is None else run
    run.loss_curve, run.eval_curve = [], []
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise ValueError("training set is empty")
    dtype = next(iter(model.params.values())).dtype
    work = model.astype(np.float64)
    opt = AdamW(work.params, lr=run.lr, weight_decay=run.weight_decay, betas=run.betas,
                eps=run.eps)
    rng = np.random.default_rng(run.seed)
    last_good = model.copy()
    for epoch in range(run.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, run.batch_size):
            idx = order[start:start + run.batch_size]
            loss, grads = backward(work, images[idx], labels[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}", model=last_good,
                                       epoch=epoch)
            opt.step(work.params, grads)
            losses.append(loss * len(idx))
        run.loss_curve.append(float(np.sum(losses) / n))
        last_good = work.astype(dtype)
        if eval_images is not None:
            run.eval_curve.append(evaluate(last_good, eval_images, eval_labels))
        log.debug("epoch %d loss %.4f", epoch, run.loss_curve[-1])
    return work.astype(dtype), run


def evaluate(model: VitModel, images, labels, batch_size: int = 256) -> float:
    """Top-1 accuracy; arg-max ties go to the lowest class index."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty split")
    return float(np.mean(predict(model, images, batch_size) == labels))

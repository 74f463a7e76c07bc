"""Mini-batch SGD shared by every objective."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .evalmetrics import EvalResult, micro_prf
from .features import Gradient, Model
from .lattice import bio_masks, viterbi
from .objectives import Instance

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 10
    learning_rate: float = 0.015
    lr_decay: float = 0.05
    max_epochs: int = 20
    patience: int = 5
    l2: float = 1e-6
    seed: int = 0
    optimizer: str = "sgd"
    workers: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.max_epochs < 0 or self.patience < 1 or self.workers < 1:
            raise ValueError("max_epochs >= 0, patience >= 1 and workers >= 1 required")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    learning_rate: float = 0.0


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_f1: float | None = None
    seconds: float = 0.0

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]


def decode(model: Model, feats, bio_mask: bool = False) -> np.ndarray:
    lat = model.lattice(feats)
    if bio_mask:
        trans, start = bio_masks(model.labels)
        lat = lat.with_transition_mask(trans, start)
    return viterbi(lat)[0]


def evaluate_checkpoint(model: Model, sentences: Sequence[Sequence[str]],
                        gold: Sequence[Sequence[str]], bio_mask: bool = True,
                        features=None) -> EvalResult:
    """Micro P/R/F1 of Viterbi decodes against unified-space gold labels."""
    if features is None:
        features = [model.featurize(s) for s in sentences]
    pred = [model.tagset.decode(decode(model, f, bio_mask)) for f in features]
    return micro_prf(gold, pred)


class _Adam:
    def __init__(self, model: Model, b1=0.9, b2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps, self.t = b1, b2, eps, 0
        self.m = [np.zeros_like(a) for a in self._params(model)]
        self.v = [np.zeros_like(a) for a in self._params(model)]

    @staticmethod
    def _params(model):
        return [model.weights, model.transition, model.start, model.stop]

    def step(self, model: Model, grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        frozen = model.kind == "local"
        for k, (p, g) in enumerate(zip(self._params(model), grads)):
            if frozen and k > 0:
                continue
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mh = self.m[k] / (1 - self.b1 ** self.t)
            vh = self.v[k] / (1 - self.b2 ** self.t)
            p -= lr * mh / (np.sqrt(vh) + self.eps)


def _batch_gradient(model: Model, batch: Sequence[Instance], pool) -> tuple[float, list[np.ndarray]]:
    results = list(pool.map(lambda inst: inst.loss_and_grad(model), batch)) if pool else \
        [inst.loss_and_grad(model) for inst in batch]
    g_w = np.zeros_like(model.weights)
    g_tr = np.zeros_like(model.transition)
    g_st = np.zeros_like(model.start)
    g_sp = np.zeros_like(model.stop)
    total = 0.0
    # Fixed reduction order keeps results independent of the worker count.
    for loss, g in results:
        total += loss
        g_w[g.rows] += g.emission
        g_tr += g.transition
        g_st += g.start
        g_sp += g.stop
    n = len(batch)
    return total, [g_w / n, g_tr / n, g_st / n, g_sp / n]


def train(model: Model, instances: Sequence[Instance], cfg: TrainConfig = TrainConfig(),
          dev: tuple[Sequence[Sequence[str]], Sequence[Sequence[str]]] | None = None,
          log_path: str | Path | None = None, bio_mask: bool = True) -> tuple[Model, TrainReport]:
    """Train ``model`` in place on ``instances`` and return the best checkpoint.

    With a dev set ``(sentences, unified labels)`` the checkpoint with the
    highest dev F1 is kept and training stops after ``patience`` epochs
    without improvement; otherwise the final weights are returned.
    """
    if not instances:
        raise ValueError("no training instances")
    started = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport()
    dev_feats = [model.featurize(s) for s in dev[0]] if dev is not None else None
    best = model.copy()
    best_f1 = -1.0
    stale = 0
    adam = _Adam(model) if cfg.optimizer == "adam" else None
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.max_epochs):
            lr = cfg.learning_rate / (1.0 + cfg.lr_decay * epoch)
            order = rng.permutation(len(instances))
            epoch_loss = 0.0
            for b in range(0, len(order), cfg.batch_size):
                batch = [instances[i] for i in order[b:b + cfg.batch_size]]
                loss, grads = _batch_gradient(model, batch, pool)
                if not math.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss {loss} at epoch {epoch}, batch {b // cfg.batch_size}; "
                        f"learning rate {lr:g} may be too high")
                epoch_loss += loss
                if cfg.l2:
                    grads[0] += cfg.l2 * model.weights
                    grads[1] += cfg.l2 * model.transition
                if lr == 0:
                    continue
                if adam is not None:
                    adam.step(model, grads, lr)
                else:
                    model.weights -= lr * grads[0]
                    if model.kind == "crf":
                        model.transition -= lr * grads[1]
                        model.start -= lr * grads[2]
                        model.stop -= lr * grads[3]
            rec = EpochRecord(epoch, epoch_loss / len(instances), learning_rate=lr)
            if dev is not None:
                res = evaluate_checkpoint(model, dev[0], dev[1], bio_mask, dev_feats)
                rec.precision, rec.recall, rec.f1 = res.precision, res.recall, res.f1
                if res.f1 > best_f1:
                    best_f1, best, stale = res.f1, model.copy(), 0
                    report.best_epoch = epoch
                else:
                    stale += 1
            else:
                best = model.copy()
                report.best_epoch = epoch
            report.epochs.append(rec)
            log.info("epoch %d loss %.4f dev F1 %s", epoch, rec.loss,
                     "-" if rec.f1 is None else f"{rec.f1:.4f}")
            if log_file:
                log_file.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
            if dev is not None and stale >= cfg.patience:
                break
    finally:
        if pool:
            pool.shutdown()
        if log_file:
            log_file.close()
    report.best_f1 = best_f1 if dev is not None else None
    report.seconds = time.perf_counter() - started
    return best, report

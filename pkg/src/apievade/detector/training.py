"""Mini-batch SGD with momentum, multi-window aware.

A sequence longer than the window is scored as the max over its windows, so
training backpropagates the cross-entropy of that max: only the top-scoring
window of each sequence receives gradient.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..core import MALWARE
from ..errors import TrainingError
from .model import OracleModel

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 0.05
    batch: int = 16
    seed: int = 0
    momentum: float = 0.9
    clip_norm: float = 5.0
    patience: Optional[int] = None


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float
    tpr: float
    fpr: float


@dataclass
class TrainResult:
    model: OracleModel
    history: list[EpochMetrics] = field(default_factory=list)

    @property
    def final(self) -> EpochMetrics:
        return self.history[-1]


def score_sequences(model: OracleModel, sequences, chunk: int = 256) -> np.ndarray:
    """Sequence scores (max over windows), batched."""
    wins, owner = [], []
    for i, s in enumerate(sequences):
        toks = s.tokens if hasattr(s, "tokens") else s
        for w in model.windows(toks):
            wins.append(w)
            owner.append(i)
    out = np.full(len(sequences), -np.inf)
    if not wins:
        return out
    owner = np.asarray(owner)
    for k in range(0, len(wins), chunk):
        s = model.scores(wins[k:k + chunk])
        np.maximum.at(out, owner[k:k + chunk], s)
    return out


def rates(scores, labels, threshold: float) -> tuple[float, float, float]:
    """(accuracy, TPR, FPR) at ``threshold``."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    pred = scores >= threshold
    pos = labels == MALWARE
    acc = float((pred == pos).mean()) if len(labels) else 0.0
    tpr = float(pred[pos].mean()) if pos.any() else 0.0
    fpr = float(pred[~pos].mean()) if (~pos).any() else 0.0
    return acc, tpr, fpr


def evaluate(model: OracleModel, sequences) -> tuple[float, float, float]:
    labels = [s.label for s in sequences]
    return rates(score_sequences(model, sequences), labels, model.threshold)


def train(model: OracleModel, train_set: Sequence, val_set: Optional[Sequence] = None,
          cfg: Optional[TrainConfig] = None) -> TrainResult:
    """Train ``model`` in place; deterministic for a fixed ``cfg.seed``."""
    cfg = cfg or TrainConfig()
    if not train_set:
        raise TrainingError("empty training set")
    labels = np.array([s.label for s in train_set])
    if len(set(labels.tolist())) < 2:
        raise TrainingError("training set must contain both labels")
    val_set = val_set if val_set else train_set

    rng = np.random.default_rng(cfg.seed)
    seq_windows = [model.windows(s.tokens) for s in train_set]
    velocity = np.zeros_like(model.params)
    result = TrainResult(model)
    best, best_params, stale = -1.0, None, 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        total, count = 0.0, 0
        for k in range(0, len(order), cfg.batch):
            idx = order[k:k + cfg.batch]
            chosen = []
            for i in idx:
                wins = seq_windows[i]
                if len(wins) == 1:
                    chosen.append(wins[0])
                else:
                    chosen.append(wins[int(np.argmax(model.scores(wins)))])
            loss, grad = model.loss_and_grad(chosen, labels[idx])
            gnorm = np.linalg.norm(grad)
            if gnorm > cfg.clip_norm:
                grad *= cfg.clip_norm / gnorm
            velocity = cfg.momentum * velocity - cfg.lr * grad
            model.params += velocity
            if model.encoding == "plain":
                model.p["emb"][0] = 0.0
            total += loss * len(idx)
            count += len(idx)
        if not np.all(np.isfinite(model.params)):
            raise TrainingError(f"non-finite parameters after epoch {epoch}")
        acc, tpr, fpr = evaluate(model, val_set)
        result.history.append(EpochMetrics(epoch, total / count, acc, tpr, fpr))
        log.info("epoch %d loss %.4f val acc %.4f tpr %.4f fpr %.4f", epoch, total / count, acc, tpr, fpr)
        if cfg.patience is not None:
            if acc > best:
                best, best_params, stale = acc, model.params.copy(), 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    if best_params is not None:
        model.params[:] = best_params
    return result


def sweep_threshold(model: OracleModel, sequences, thresholds=None) -> list[tuple[float, float, float]]:
    """(threshold, TPR, FPR) rows in ascending threshold order."""
    scores = score_sequences(model, sequences)
    labels = [s.label for s in sequences]
    if thresholds is None:
        thresholds = np.round(np.linspace(0.0, 1.0, 21), 4).tolist() + [1.0 + 1e-9]
    rows = []
    for t in sorted(float(x) for x in thresholds):
        _, tpr, fpr = rates(scores, labels, t)
        rows.append((t, tpr, fpr))
    return rows

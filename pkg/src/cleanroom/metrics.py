"""Offline evaluation metrics: ROC-AUC, calibration ratio and log loss."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from cleanroom.privacy import P_CLAMP


class MetricError(ValueError):
    pass


@dataclass
class EvalReport:
    auc: float
    calibration_ratio: float
    log_loss: float
    n: int
    n_plus: int
    n_minus: int
    base_rate: float

    def to_dict(self) -> dict:
        return asdict(self)


def _prep(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise MetricError("scores and labels differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise MetricError("labels must be binary")
    return s, y.astype(bool)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC-AUC is undefined with a single class")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def calibration_ratio(probs, labels) -> float:
    """Mean prediction over observed positive rate; 1.0 is perfectly calibrated."""
    p, y = _prep(probs, labels)
    if not y.any():
        raise MetricError("calibration ratio needs at least one positive")
    return float(p.mean() / y.mean())


def log_loss(probs, labels) -> float:
    p, y = _prep(probs, labels)
    p = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    return float(-np.mean(np.where(y, np.log(p), np.log1p(-p))))


def evaluate(probs, labels) -> EvalReport:
    p, y = _prep(probs, labels)
    n_plus = int(y.sum())
    return EvalReport(
        auc=roc_auc(p, y),
        calibration_ratio=calibration_ratio(p, y),
        log_loss=log_loss(p, y),
        n=int(y.size),
        n_plus=n_plus,
        n_minus=int(y.size - n_plus),
        base_rate=n_plus / y.size,
    )

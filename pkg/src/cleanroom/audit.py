"""Label-recovery attack against the batch aggregate.

The feature party knows every per-sample gradient row ``G[i]`` and its own
predictions ``p_i``. The aggregate it receives is ``G^T (dL/dz)``, a linear
system in ``b`` unknowns with ``||f||`` equations, so once ``||f|| >= b``
the per-sample loss gradients and hence the labels fall out of a least
squares solve.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg

from cleanroom import compression, privacy
from cleanroom.compression import Codec
from cleanroom.model import AdaptedModel, BaseModel, PerSampleGrads
from cleanroom.protocol import CleanRoom, ForwardBatch, SessionConfig, batch_rng

DETERMINED = "determined"
UNDERDETERMINED = "underdetermined"
CSV_FIELDS = ["b", "param_count", "codec", "epsilon", "accuracy", "residual"]


@dataclass
class LeakageReport:
    batch_size: int
    param_count: int
    recovery_accuracy: float
    residual: float
    regime: str
    majority_rate: float
    degenerate: bool = False
    codec: str = "none"
    epsilon: float | None = None


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-12, 1 - 1e-12)
    return np.log(p) - np.log1p(-p)


def recover_labels(
    G: PerSampleGrads | np.ndarray,
    agg_grad: np.ndarray,
    p: np.ndarray,
    true_labels: np.ndarray,
    loss_mode: privacy.LossMode = privacy.LossMode(),
    ridge: float = 1e-8,
) -> tuple[np.ndarray, LeakageReport]:
    """Solve ``min_a ||G^T a - agg||^2 + ridge ||a||^2`` and read labels off ``a``.

    ``a_i`` estimates ``dL_i/dz_i``; each label is whichever of {0, 1} gives
    the nearer loss gradient at ``p_i`` (for plain BCE that is
    ``round(p_i - a_i)``). ``ridge`` is relative to the mean squared row norm.
    """
    G = G.G if isinstance(G, PerSampleGrads) else np.asarray(G, dtype=np.float64)
    agg = np.asarray(agg_grad, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(true_labels).astype(np.int8)
    b, f = G.shape
    if agg.shape != (f,) or p.shape != (b,) or y.shape != (b,):
        raise ValueError("shapes of G, aggregate, predictions and labels are inconsistent")
    regime = DETERMINED if f >= b else UNDERDETERMINED
    majority = float(max(y.mean(), 1 - y.mean()))
    gram = G @ G.T
    scale = float(np.trace(gram)) / b
    if scale == 0.0:
        guess = np.full(b, int(y.mean() >= 0.5), dtype=np.int8)
        return guess, LeakageReport(b, f, majority, float(np.linalg.norm(agg)), regime, majority, degenerate=True)
    a = scipy.linalg.solve(gram + ridge * scale * np.eye(b), G @ agg, assume_a="pos")
    z = _logit(p)
    g0 = privacy.loss_grad_wrt_logit(z, np.zeros(b), loss_mode)
    g1 = privacy.loss_grad_wrt_logit(z, np.ones(b), loss_mode)
    guess = (np.abs(a - g1) < np.abs(a - g0)).astype(np.int8)
    residual = float(np.linalg.norm(G.T @ a - agg))
    return guess, LeakageReport(b, f, float(np.mean(guess == y)), residual, regime, majority)


def random_attack_model(
    d: int, hidden: Sequence[int], rank: int, seed: int, layers: Sequence[int] | None = None
) -> tuple[AdaptedModel, str]:
    """Random base with a fully random adapter (non-zero B) on ``layers`` (default: all)."""
    model = AdaptedModel(BaseModel.init(d, hidden, seed).freeze())
    layers = range(len(model.base.layers)) if layers is None else layers
    ranks = [min(rank, model.base.layers[i].d_in, model.base.layers[i].d_out) for i in layers]
    ad = model.add_adapter("audit", layers=layers, rank=ranks, seed=seed + 1)
    rng = np.random.default_rng(seed + 2)
    for f in ad.factors.values():
        f.B[...] = rng.normal(0, 1.0 / np.sqrt(f.rank), f.B.shape)
    return model, "audit"


def leakage_trial(
    model: AdaptedModel,
    adapter_id: str,
    X: np.ndarray,
    y: np.ndarray,
    codec: Codec = Codec(),
    epsilon: float | None = None,
    seed: int = 0,
) -> LeakageReport:
    """Run one batch through the real clean-room aggregation and attack it.

    Recovery accuracy is scored against the true (pre-flip) labels.
    """
    b = X.shape[0]
    ids = np.arange(1, b + 1, dtype=np.uint64)
    budget = privacy.PrivacyBudget("label_dp", epsilon) if epsilon else privacy.PrivacyBudget()
    cfg = SessionConfig(b, model.param_count(adapter_id), codec, budget, debias=False, seed=seed)
    room = CleanRoom(dict(zip(ids.tolist(), y.tolist())), cfg, flip_seed=seed)
    z = model.forward(X, adapter_id)
    G = model.per_sample_grads(X, adapter_id)
    enc = compression.encode(G, codec, batch_rng(seed, 0))
    logits = z if cfg.wide else z.astype(np.float32).astype(np.float64)
    agg = room.aggregate(ForwardBatch(0, ids, logits, enc, cfg.wide)).gradient
    _, report = recover_labels(G, agg, privacy.sigmoid(z), y, cfg.loss_mode)
    report.codec, report.epsilon = str(codec), epsilon
    return report


def leakage_sweep(
    b_values: Iterable[int],
    d: int = 16,
    hidden: Sequence[int] = (32, 16),
    rank: int = 1,
    layers: Sequence[int] | None = None,
    codecs: Sequence[Codec] = (Codec(),),
    epsilons: Sequence[float | None] = (None,),
    trials: int = 3,
    positive_rate: float = 0.5,
    seed: int = 0,
) -> list[LeakageReport]:
    """Mean recovery accuracy over ``trials`` random batches for each (b, codec, epsilon).

    Labels are drawn independently of the features, so any accuracy above
    the majority rate is leakage from the aggregate, not from the model.
    """
    rows = []
    for b in b_values:
        for codec in codecs:
            for eps in epsilons:
                reps = []
                for t in range(trials):
                    model, aid = random_attack_model(d, hidden, rank, seed + 1000 * t, layers)
                    rng = np.random.default_rng([seed, b, t])
                    X = rng.standard_normal((b, d))
                    y = (rng.random(b) < positive_rate).astype(np.int8)
                    reps.append(leakage_trial(model, aid, X, y, codec, eps, seed=seed + t))
                r0 = reps[0]
                rows.append(LeakageReport(
                    b, r0.param_count,
                    float(np.mean([r.recovery_accuracy for r in reps])),
                    float(np.mean([r.residual for r in reps])),
                    r0.regime,
                    float(np.mean([r.majority_rate for r in reps])),
                    any(r.degenerate for r in reps), str(codec), eps,
                ))
    return rows


def write_sweep_csv(rows: Sequence[LeakageReport], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in rows:
            w.writerow([r.batch_size, r.param_count, r.codec, "" if r.epsilon is None else r.epsilon,
                        f"{r.recovery_accuracy:.6f}", f"{r.residual:.6g}"])


def sweep_to_dicts(rows: Sequence[LeakageReport]) -> list[dict]:
    return [asdict(r) for r in rows]

"""Label DP by randomized response, and the clean room's loss / loss gradient.

The de-biased loss evaluates binary cross-entropy at the *flipped-label*
probability ``p q + (1 - p)(1 - q)`` so that a model trained on flipped
labels still predicts the original positive rate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

P_CLAMP = 1e-7


class PrivacyError(ValueError):
    pass


def keep_prob(epsilon: float) -> float:
    """Probability of keeping a label under epsilon-label-DP randomized response."""
    if not math.isfinite(epsilon) or epsilon <= 0:
        raise PrivacyError(f"epsilon must be positive and finite, got {epsilon}")
    # e^eps / (e^eps + 1) without overflow
    return 1.0 / (1.0 + math.exp(-epsilon))


@dataclass(frozen=True)
class PrivacyBudget:
    mode: str = "off"  # "off" | "label_dp"
    epsilon: float | None = None

    def __post_init__(self):
        if self.mode not in ("off", "label_dp"):
            raise PrivacyError(f"unknown privacy mode {self.mode!r}")
        if self.mode == "label_dp":
            keep_prob(self.epsilon if self.epsilon is not None else float("nan"))

    @property
    def keep_prob(self) -> float:
        return 1.0 if self.mode == "off" else keep_prob(self.epsilon)


@dataclass(frozen=True)
class LossMode:
    """``q=None`` is plain BCE; a keep-probability selects the de-biased loss."""

    q: float | None = None
    reduction: str = "sum"

    def __post_init__(self):
        if self.reduction not in ("sum", "mean"):
            raise PrivacyError(f"unknown reduction {self.reduction!r}")
        if self.q is not None:
            _check_q(self.q)

    @property
    def debiased(self) -> bool:
        return self.q is not None and self.q < 1.0

    @classmethod
    def plain(cls, reduction: str = "sum") -> "LossMode":
        return cls(None, reduction)

    @classmethod
    def debias(cls, q: float, reduction: str = "sum") -> "LossMode":
        return cls(q, reduction)


@dataclass(frozen=True)
class FlippedLabels:
    labels: np.ndarray
    flip_mask: np.ndarray
    seed: int


def _check_q(q: float) -> None:
    if not (0.5 < q <= 1.0):
        raise PrivacyError(f"keep probability must lie in (0.5, 1], got {q}")


def _check_labels(y) -> np.ndarray:
    y = np.asarray(y)
    if y.size and not np.all((y == 0) | (y == 1)):
        raise PrivacyError("labels must be binary")
    return y.astype(np.int8)


def flip_labels(y, q: float, seed: int) -> FlippedLabels:
    """Keep each label independently with probability ``q``, else flip it."""
    _check_q(q)
    y = _check_labels(y)
    rng = np.random.default_rng(seed)
    mask = (rng.random(y.shape[0]) >= q).astype(np.int8)
    return FlippedLabels(y ^ mask, mask, seed)


def debias_prob(p, q: float):
    _check_q(q)
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any((p_arr < 0) | (p_arr > 1)) or not np.all(np.isfinite(p_arr)):
        raise PrivacyError("probabilities must lie in [0, 1]")
    out = p_arr * q + (1.0 - p_arr) * (1.0 - q)
    return float(out) if np.ndim(p) == 0 else out


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _prep(z, y):
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    y = np.atleast_1d(_check_labels(y)).astype(np.float64)
    if z.shape != y.shape:
        raise PrivacyError(f"logits and labels differ in length: {z.shape} vs {y.shape}")
    return z, y


def per_sample_loss(z, y, mode: LossMode = LossMode()) -> np.ndarray:
    z, y = _prep(z, y)
    p = sigmoid(z)
    if mode.debiased:
        p = debias_prob(p, mode.q)
    else:
        p = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def loss(z, y, mode: LossMode = LossMode()) -> float:
    per = per_sample_loss(z, y, mode)
    return float(per.sum() if mode.reduction == "sum" else per.mean())


def loss_grad_wrt_logit(z, y, mode: LossMode = LossMode()) -> np.ndarray:
    """dL/dz_i for each sample.

    Plain BCE gives ``p - y``; the de-biased loss chains through
    ``dp~/dz = (2q - 1) p (1 - p)``.
    """
    z, y = _prep(z, y)
    p = sigmoid(z)
    if mode.debiased:
        q = mode.q
        pt = p * q + (1.0 - p) * (1.0 - q)
        g = (2.0 * q - 1.0) * p * (1.0 - p) * (pt - y) / (pt * (1.0 - pt))
    else:
        g = p - y
    if mode.reduction == "mean":
        g = g / z.shape[0]
    return g

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cleanroom import metrics, privacy
from cleanroom.metrics import MetricError
from oracles import brute_force_auc


def test_auc_examples():
    assert metrics.roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert metrics.roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert metrics.roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(MetricError):
        metrics.roc_auc([0.1, 0.2], [1, 1])


@settings(max_examples=60, deadline=None)
@given(data=st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=2, max_size=40))
def test_auc_matches_brute_force_with_ties(data):
    scores = [s / 6 for s, _ in data]
    labels = [l for _, l in data]
    if len(set(labels)) < 2:
        return
    assert metrics.roc_auc(scores, labels) == pytest.approx(brute_force_auc(scores, labels), abs=1e-12)


def test_auc_monotone_invariance_and_reflection():
    rng = np.random.default_rng(0)
    s = rng.standard_normal(500)
    y = (rng.random(500) < 0.3).astype(int)
    a = metrics.roc_auc(s, y)
    assert metrics.roc_auc(np.exp(s), y) == pytest.approx(a, abs=1e-12)
    assert metrics.roc_auc(privacy.sigmoid(3 * s + 1), y) == pytest.approx(a, abs=1e-12)
    assert a + metrics.roc_auc(-s, y) == pytest.approx(1.0, abs=1e-12)


def test_calibration_ratio():
    y = np.array([1, 0, 0, 0, 0] * 4)
    assert metrics.calibration_ratio(np.full(20, 0.2), y) == pytest.approx(1.0)
    assert metrics.calibration_ratio(np.full(20, 0.4), y) == pytest.approx(2.0)
    with pytest.raises(MetricError):
        metrics.calibration_ratio([0.1, 0.2], [0, 0])


def test_log_loss():
    y = np.array([0, 1, 1, 0])
    assert metrics.log_loss(y.astype(float), y) == pytest.approx(0.0, abs=1e-6)
    assert metrics.log_loss(np.full(4, 0.5), y) == pytest.approx(math.log(2))
    z = np.random.default_rng(1).normal(0, 2, 100)
    yy = np.random.default_rng(2).integers(0, 2, 100)
    assert metrics.log_loss(privacy.sigmoid(z), yy) == pytest.approx(
        privacy.loss(z, yy, privacy.LossMode.plain("mean")), rel=1e-10
    )


def test_evaluate_report():
    rep = metrics.evaluate([0.1, 0.9, 0.2, 0.3], [0, 1, 0, 1])
    assert rep.n == rep.n_plus + rep.n_minus == 4
    assert rep.base_rate == 0.5
    assert set(rep.to_dict()) >= {"auc", "calibration_ratio", "log_loss"}

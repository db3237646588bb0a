import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svgpcr.errors import DataError
from svgpcr.metrics import (
    accuracy,
    auc,
    confusion_recovery_error,
    label_reconstruction,
    mean_likelihood,
    mean_log_likelihood,
    metrics_table,
)

from oracles import auc_pairs


def test_accuracy_examples():
    assert accuracy(np.eye(3), [0, 1, 2])[0] == 1.0
    acc, per = accuracy(np.full((4, 2), 0.5), [0, 1, 0, 1])
    assert acc == 0.5 and per.tolist() == [1.0, 0.0]
    P = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]])
    assert accuracy(P, [0, 1, 0, 0])[0] == 0.75


def test_likelihood_examples():
    assert mean_likelihood(np.eye(2), [0, 1])[0] == 1.0
    assert mean_likelihood(np.full((3, 10), 0.1), [0, 4, 9])[0] == pytest.approx(0.1)
    lik, per = mean_likelihood([[0.8, 0.2], [0.3, 0.7]], [0, 1])
    assert lik == pytest.approx(0.75) and per.tolist() == pytest.approx([0.8, 0.7])
    assert mean_log_likelihood([[0.8, 0.2], [0.3, 0.7]], [0, 1]) == pytest.approx((math.log(0.8) + math.log(0.7)) / 2)


def test_absent_class_is_nan():
    _, per = accuracy(np.eye(3)[[0, 0]], [0, 0])
    assert per[0] == 1.0 and np.isnan(per[1]) and np.isnan(per[2])


def test_shape_and_range_errors():
    with pytest.raises(DataError):
        accuracy(np.eye(2), [0, 1, 1])
    with pytest.raises(DataError):
        accuracy(np.eye(2), [0, 2])


def test_auc_examples():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.5] * 4, [0, 1, 0, 1]) == 0.5
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)
    with pytest.raises(DataError, match="one class"):
        auc([0.1, 0.2], [1, 1])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 30), st.integers(0, 1)), min_size=2, max_size=60))
def test_auc_matches_pair_enumeration_and_monotone_invariance(pairs):
    scores = np.array([p[0] for p in pairs], dtype=np.float64)
    truth = np.array([p[1] for p in pairs])
    if truth.min() == truth.max():
        return
    value = auc(scores, truth)
    assert value == pytest.approx(auc_pairs(scores, truth), abs=1e-12)
    assert auc(np.exp(scores / 7.0) + 3 * scores, truth) == pytest.approx(value, abs=1e-12)


def test_shuffled_scores_give_chance_auc():
    rng = np.random.default_rng(0)
    truth = rng.integers(0, 2, 10_000)
    assert abs(auc(rng.random(10_000), truth) - 0.5) <= 0.05


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
def test_permutation_invariance(seed, K):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(K), size=30)
    y = rng.integers(0, K, 30)
    perm = rng.permutation(K)
    inv = np.argsort(perm)
    Pp, yp = P[:, perm], inv[y]
    assert mean_likelihood(Pp, yp)[0] == pytest.approx(mean_likelihood(P, y)[0], abs=1e-15)
    assert accuracy(Pp, yp)[0] == accuracy(P, y)[0]  # continuous draws have no ties


def test_confusion_recovery():
    T = np.stack([np.full((3, 3), 1 / 3), np.eye(3)])
    mx, mean = confusion_recovery_error(T, T)
    assert mx.tolist() == [0.0, 0.0] and mean.tolist() == [0.0, 0.0]
    E = T.copy()
    E[1, 0, 0] -= 0.05
    E[1, 1, 0] += 0.05
    assert confusion_recovery_error(E, T)[0][1] == pytest.approx(0.05)
    assert confusion_recovery_error(np.full((1, 4, 4), 0.25), np.full((1, 4, 4), 0.25))[0][0] == 0.0
    with pytest.raises(DataError):
        confusion_recovery_error(T[:1], T)


def test_table_and_reconstruction():
    P = np.array([[0.9, 0.1], [0.4, 0.6], [0.7, 0.3]])
    rows = metrics_table(P, [0, 1, 1])
    assert [r["class"] for r in rows] == ["0", "1", "global"]
    assert rows[-1]["accuracy"] == pytest.approx(2 / 3)
    assert rows[-1]["auc"] == pytest.approx(auc_pairs(P[:, 1], [0, 1, 1]))
    rec = label_reconstruction(P, [0, 1, 1])
    assert rec["accuracy"] == pytest.approx(2 / 3) and rec["likelihood"] == pytest.approx((0.9 + 0.6 + 0.3) / 3)

import math

import numpy as np
import pytest

from sgnet import metrics, model
from sgnet.errors import DataError, DimensionError
from sgnet.graph import SceneAnnotation
from sgnet.metrics import average_precision, binary_auc, macro_auc, mean_average_precision, micro_recall

from conftest import random_record


def ap_oracle(scores, labels):
    """Precision at every positive, with ties ordered by original index."""
    n = len(scores)
    rank = [1 + sum(1 for j in range(n) if scores[j] > scores[i] or (scores[j] == scores[i] and j < i))
            for i in range(n)]
    precisions = []
    for i in range(n):
        if labels[i]:
            hits = sum(1 for j in range(n) if labels[j] and rank[j] <= rank[i])
            precisions.append(hits / rank[i])
    return math.fsum(precisions) / len(precisions)


def auc_oracle(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def random_instance(rng, need_negative=False):
    while True:
        n = int(rng.integers(2, 21))
        # a coarse grid half the time, so ties are common
        scores = rng.integers(0, 5, n) / 4.0 if rng.random() < 0.5 else rng.random(n)
        labels = rng.integers(0, 2, n)
        if labels.any() and not (need_negative and labels.all()):
            return scores, labels


def test_ap_examples():
    assert average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert average_precision([0.9, 0.2], [0, 1]) == 0.5
    assert average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == pytest.approx(5 / 6, abs=1e-15)


def test_ap_stable_ties():
    # the tied positive comes after the tied negative in input order
    assert average_precision([0.5, 0.5], [0, 1]) == 0.5
    assert average_precision([0.5, 0.5], [1, 0]) == 1.0


def test_ap_needs_positive():
    with pytest.raises(DataError):
        average_precision([0.1, 0.2], [0, 0])


def test_ap_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        s, y = random_instance(rng)
        assert average_precision(s, y) == ap_oracle(list(s), list(y))


def test_auc_examples():
    assert binary_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert binary_auc([0.1, 0.2, 0.9], [0, 0, 1]) == 1.0
    assert binary_auc([0.3] * 5, [0, 1, 0, 1, 1]) == 0.5


def test_auc_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        s, y = random_instance(rng, need_negative=True)
        assert binary_auc(s, y) == auc_oracle(list(s), list(y))


def test_monotone_invariance():
    rng = np.random.default_rng(2)
    transforms = [lambda x: 3.0 * x - 1.0, np.exp, lambda x: x**3 + x, lambda x: np.arctan(5 * x)]
    for i in range(1000):
        s, y = random_instance(rng, need_negative=True)
        f = transforms[i % len(transforms)]
        assert average_precision(f(s), y) == average_precision(s, y)
        assert binary_auc(f(s), y) == binary_auc(s, y)


def test_micro_recall():
    t = np.array([[1, 0], [0, 1]], dtype=float)
    assert micro_recall(t, t) == 1.0
    assert micro_recall(np.zeros((2, 2)), t) == 0.0
    with pytest.raises(DataError):
        micro_recall(np.zeros((2, 2)), np.zeros((2, 2)))


def test_micro_recall_counting():
    rng = np.random.default_rng(3)
    probs = rng.random((4, 5))
    targets = rng.integers(0, 2, (4, 5))
    tp = fn = 0
    for p, t in zip(probs.ravel(), targets.ravel()):
        if t == 1 and p >= 0.5:
            tp += 1
        elif t == 1:
            fn += 1
    assert micro_recall(probs, targets) == tp / (tp + fn)


def test_macro_auc_skips_ineligible_classes():
    probs = np.array([[0.9, 0.1, 0.3], [0.2, 0.8, 0.3]])
    targets = np.array([[1, 1, 0], [0, 1, 0]])
    # only the first column has both a positive and a negative
    assert macro_auc(probs, targets) == 1.0
    with pytest.raises(DataError):
        macro_auc(probs[:, 1:], targets[:, 1:])


def test_map_over_present_classes():
    probs = np.array([[0.9, 0.1], [0.2, 0.3]])
    targets = np.array([[1, 0], [0, 0]])
    assert mean_average_precision(probs, targets) == 1.0
    with pytest.raises(DataError):
        mean_average_precision(probs, np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        mean_average_precision(probs, np.zeros((2, 3)))


def test_evaluate_zero_model_is_chance(small_cfg):
    rng = np.random.default_rng(4)
    scenes, records = [], []
    for i in range(6):
        scenes.append(SceneAnnotation(f"s{i}", (
            (0, 0, (0.1, 0.1, 0.9, 0.9)), (1, 2, (0.1, 0.1, 0.2, 0.2)), (2, 3, (0.1, 0.1, 0.2, 0.2))),
            ((0, 1, i % 3),)))
        records.append(random_record(3, 8, rng))
    report = metrics.evaluate(model.init_params(small_cfg, zero=True), small_cfg, records, scenes)
    assert report.auc == 0.5
    assert report.mean_hinge == pytest.approx(12.0)
    assert report.recall == 1.0  # sigmoid(0) sits exactly on the threshold
    assert report.counts[:3] == [4, 4, 4] and sum(report.counts) == 12
    assert report.per_class_ap[5] is None
    back = metrics.EvalReport.from_dict(report.to_dict())
    assert back == report
    table = report.render("zero")
    assert [c.strip() for c in table.splitlines()[0].split("|")] == ["Models", "mAP", "Hinge", "Recall", "AUC"]

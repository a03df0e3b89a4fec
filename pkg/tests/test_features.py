import math

import numpy as np
import pytest

from sgnet import tensor as T
from sgnet.errors import ContractError, DataError, DimensionError
from sgnet.features import (
    ClassifierParams,
    SmoothingConfig,
    cluster_compactness,
    extract_features,
    ls_cross_entropy,
    smooth_labels,
    train_classifier,
)
from sgnet.tensor import Tensor

# -(T . log P) for K=3, eps=0.1, target 0, P=[0.7, 0.2, 0.1], evaluated with
# mpmath at 40 digits and frozen here.
LS_CE_ORACLE = 0.4632973811904217556


def onehot(k, K):
    t = np.zeros(K)
    t[k] = 1.0
    return t


def test_smooth_labels_k4():
    out = smooth_labels(onehot(0, 4), SmoothingConfig(0.1, 4))
    np.testing.assert_allclose(out, [0.925, 0.025, 0.025, 0.025], rtol=0, atol=1e-12)


def test_smooth_labels_k12():
    out = smooth_labels(onehot(3, 12), SmoothingConfig(0.1, 12))
    assert abs(out[3] - (0.9 + 0.1 / 12)) < 1e-12
    others = np.delete(out, 3)
    assert np.all(np.abs(others - 0.1 / 12) < 1e-12)


def test_smooth_labels_identity_at_zero_epsilon():
    t = onehot(2, 5)
    np.testing.assert_array_equal(smooth_labels(t, SmoothingConfig(0.0, 5)), t)


def test_smooth_labels_rejects_non_onehot():
    with pytest.raises(ContractError):
        smooth_labels([0.5, 0.5, 0.0], SmoothingConfig(0.1, 3))


def test_smoothing_properties_random():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        K = int(rng.integers(2, 20))
        eps = rng.uniform(0.0, (K - 1) / K)
        k = int(rng.integers(K))
        out = smooth_labels(onehot(k, K), SmoothingConfig(eps, K))
        assert abs(out.sum() - 1.0) < 1e-12
        assert out.min() >= eps / K - 1e-15
        assert int(np.argmax(out)) == k


def test_ls_cross_entropy_uniform_is_log_k():
    for K in (2, 3, 12):
        target = smooth_labels(onehot(1, K), SmoothingConfig(0.1, K))
        val = ls_cross_entropy(Tensor(np.full(K, 1.0 / K)), target).item()
        assert abs(val - math.log(K)) < 1e-12


def test_ls_cross_entropy_perfect_prediction():
    t = onehot(0, 3)
    assert ls_cross_entropy(Tensor(t), t).item() < 1e-12


def test_ls_cross_entropy_against_arbitrary_precision():
    target = smooth_labels(onehot(0, 3), SmoothingConfig(0.1, 3))
    val = ls_cross_entropy(Tensor([0.7, 0.2, 0.1]), target).item()
    assert abs(val - LS_CE_ORACLE) < 1e-12


def test_ls_cross_entropy_rejects_negative_probs():
    with pytest.raises(ContractError):
        ls_cross_entropy(Tensor([1.2, -0.2]), [0.5, 0.5])


def test_ls_cross_entropy_minimized_at_target():
    rng = np.random.default_rng(1)
    K = 5
    target = smooth_labels(onehot(2, K), SmoothingConfig(0.2, K))
    best = ls_cross_entropy(Tensor(target), target).item()
    for p in rng.dirichlet(np.ones(K), size=1000):
        assert ls_cross_entropy(Tensor(p), target).item() >= best


def test_ls_cross_entropy_gradient():
    target = smooth_labels(onehot(1, 4), SmoothingConfig(0.1, 4))
    p = Tensor([0.1, 0.5, 0.3, 0.1], requires_grad=True)
    report = T.grad_check(lambda: ls_cross_entropy(p, target), [p], step=1e-7)
    assert report.passed, report.errors


def test_extract_zero_params_gives_zero():
    params = ClassifierParams.init(6, 3, feature_dim=10)
    for t in params.as_dict().values():
        t.data[...] = 0.0
    out = extract_features(params, np.arange(6.0))
    assert out.shape == (10,) and not out.any()


def test_extract_deterministic_and_default_width():
    params = ClassifierParams.init(7, 4, seed=3)
    x = np.random.default_rng(0).normal(size=(5, 7))
    a, b = extract_features(params, x), extract_features(params, x.copy())
    assert a.shape == (5, 200)
    np.testing.assert_array_equal(a, b)


def test_extract_dimension_mismatch():
    with pytest.raises(DimensionError):
        extract_features(ClassifierParams.init(7, 4), np.zeros(6))


def test_train_classifier_reduces_loss():
    rng = np.random.default_rng(2)
    centers = rng.normal(size=(3, 10))
    y = rng.integers(0, 3, 300)
    x = centers[y] + 0.3 * rng.normal(size=(300, 10))
    _, hist = train_classifier(x, y, SmoothingConfig(0.1, 3), epochs=5, feature_dim=16)
    assert hist[-1] < hist[0]


def test_train_classifier_empty_dataset():
    with pytest.raises(DataError):
        train_classifier(np.zeros((0, 3)), np.zeros(0, dtype=int), SmoothingConfig(0.1, 3))


def test_compactness_zero_spread():
    x = np.array([[0.0, 0.0], [0.0, 0.0], [3.0, 4.0], [3.0, 4.0]])
    assert cluster_compactness(x, [0, 0, 1, 1]) == 0.0


def test_compactness_all_identical():
    assert cluster_compactness(np.ones((4, 3)), [0, 0, 1, 1]) == 0.0


def test_compactness_hand_placed_points():
    a = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
    b = a + 5.0
    # within-class pairwise distances 1, 2, sqrt(5) in both classes;
    # centroids are a (5, 5) shift apart
    want = ((3.0 + math.sqrt(5.0)) / 3.0) / (5.0 * math.sqrt(2.0))
    got = cluster_compactness(np.vstack([a, b]), [0, 0, 0, 1, 1, 1])
    assert abs(got - want) < 1e-12


def test_compactness_needs_two_classes():
    with pytest.raises(DataError):
        cluster_compactness(np.zeros((3, 2)), [0, 0, 0])

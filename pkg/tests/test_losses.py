import math

import numpy as np
import pytest

from sgnet import data, losses, model
from sgnet import tensor as T
from sgnet.errors import ConfigError, ContractError, DataError, DimensionError, NumericError
from sgnet.graph import SceneAnnotation, ground_truth_targets
from sgnet.losses import AdamState, LossConfig, adam_step, adjacency_loss, hinge_loss, total_loss
from sgnet.tensor import Tensor


def test_hinge_zero_when_margin_met():
    y = np.random.default_rng(0).integers(0, 2, (3, 12)).astype(float)
    scores = Tensor(np.where(y == 1, 1.0, -1.0))
    assert hinge_loss(scores, y).item() == 0.0


def test_hinge_all_zero_scores_equals_margin():
    y = np.random.default_rng(1).integers(0, 2, (4, 12)).astype(float)
    # unit weights: 12 slots per node, each contributes margin, averaged over nodes
    assert hinge_loss(Tensor(np.zeros((4, 12))), y).item() == pytest.approx(12.0, abs=1e-12)


def test_hinge_weighted_two_nodes_scalar():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 2, (2, 12)).astype(float)
    s = rng.normal(0, 1.5, (2, 12))
    w = [1.0 / (k + 1) for k in range(12)]
    w = [x / (sum(w) / 12) for x in w]
    want = 0.0
    for v in range(2):
        for k in range(12):
            sign = 1.0 if y[v, k] else -1.0
            want += w[k] * max(0.0, 1.0 - sign * s[v, k])
    want /= 2
    assert hinge_loss(Tensor(s), y, LossConfig(tuple(w))).item() == pytest.approx(want, rel=1e-13)


def test_hinge_non_negative_and_zero_iff_margin_met():
    rng = np.random.default_rng(3)
    for _ in range(200):
        y = rng.integers(0, 2, (3, 12)).astype(float)
        s = rng.normal(0, 2, (3, 12))
        val = hinge_loss(Tensor(s), y).item()
        met = ((2 * y - 1) * s >= 1).all()
        assert val >= 0 and (val == 0) == met


def test_hinge_rejects_non_binary():
    with pytest.raises(ContractError):
        hinge_loss(Tensor(np.zeros((1, 12))), np.full((1, 12), 0.5))


def test_hinge_gradient_away_from_kinks():
    rng = np.random.default_rng(4)
    y = rng.integers(0, 2, (3, 12)).astype(float)
    s = rng.normal(0, 2, (3, 12))
    slack = 1 - (2 * y - 1) * s
    s[np.abs(slack) < 1e-3] += 0.01
    x = Tensor(s, requires_grad=True)
    cfg = LossConfig(tuple(rng.uniform(0.5, 2, 12)))
    report = T.grad_check(lambda: hinge_loss(x, y, cfg), [x], step=1e-6)
    assert report.max_error <= 1e-4


def test_bce_perfect_prediction():
    t = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)
    assert adjacency_loss(Tensor(t), t).item() < 1e-11


def test_bce_half_is_ln2():
    t = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]], dtype=float)
    assert adjacency_loss(Tensor(np.full((3, 3), 0.5)), t).item() == pytest.approx(math.log(2), abs=1e-15)


def test_bce_three_node_scalar():
    p = np.array([[0.0, 0.8, 0.3], [0.8, 0.0, 0.6], [0.3, 0.6, 0.0]])
    t = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)
    want = -(math.log(0.8) + math.log(1 - 0.3) + math.log(0.6)) / 3
    assert adjacency_loss(Tensor(p), t).item() == pytest.approx(want, rel=1e-14)


def test_bce_rejects_asymmetric():
    p = np.array([[0.0, 0.8], [0.2, 0.0]])
    with pytest.raises(ContractError):
        adjacency_loss(Tensor(p), np.zeros((2, 2)))


def test_total_loss_combines_terms():
    out = {"scores": Tensor(np.zeros((2, 12))), "adjacency": Tensor(np.array([[0, 0.5], [0.5, 0]]))}
    cfg = LossConfig(adjacency_loss_weight=2.0)
    terms = total_loss(out, np.array([[0, 1], [1, 0.0]]), np.zeros((2, 12)), cfg)
    assert terms["total"].item() == pytest.approx(12.0 + 2 * math.log(2))


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig((1.0,) * 11)
    with pytest.raises(ConfigError):
        LossConfig((0.0,) + (1.0,) * 11)


# ------------------------------------------------------------------ adam


def test_adam_zero_gradient():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    state = AdamState()
    adam_step(p, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    assert state.t == 1


@pytest.mark.parametrize("g", [1e-2, -0.3, 5.0, -1e3])
def test_adam_first_step_magnitude(g):
    lr = 1e-3
    p = {"w": Tensor(np.array([0.5]))}
    adam_step(p, {"w": np.array([g])}, AdamState(lr=lr))
    delta = p["w"].data[0] - 0.5
    assert abs(abs(delta) - lr) / lr < 1e-6
    assert np.sign(delta) == -np.sign(g)


def test_adam_first_step_small_gradient_bias():
    # at |g| = 1e-3 the eps term alone shifts the step by ~1e-5 relative
    p = {"w": Tensor(np.array([0.0]))}
    adam_step(p, {"w": np.array([1e-3])}, AdamState(lr=1e-3))
    assert abs(abs(p["w"].data[0]) - 1e-3) / 1e-3 == pytest.approx(1e-5, rel=1e-3)


def test_adam_two_steps_on_square():
    theta = Tensor(np.array(1.0), requires_grad=True)
    state = AdamState(lr=0.1)
    seen = []
    for _ in range(2):
        with T.Tape():
            loss = T.mul(theta, theta)
        T.backward(loss)
        losses.step({"theta": theta}, state)
        seen.append(theta.item())
    # scalar recurrences written out by hand
    t1 = 1 - 0.1 * (0.2 / 0.1) / (math.sqrt(0.004 / 0.001) + 1e-8)
    g2 = 2 * t1
    m2 = 0.9 * 0.2 + 0.1 * g2
    v2 = 0.999 * 0.004 + 0.001 * g2 * g2
    t2 = t1 - 0.1 * (m2 / (1 - 0.9**2)) / (math.sqrt(v2 / (1 - 0.999**2)) + 1e-8)
    assert seen[0] == pytest.approx(t1, rel=1e-14) == pytest.approx(0.9000000005, rel=1e-12)
    assert seen[1] == pytest.approx(t2, rel=1e-14) == pytest.approx(0.8004122286917921, rel=1e-12)


def test_adam_rejects_bad_gradients():
    p = {"w": Tensor(np.zeros(3))}
    with pytest.raises(DimensionError):
        adam_step(p, {"w": np.zeros(2)}, AdamState())
    with pytest.raises(NumericError):
        adam_step(p, {"w": np.array([0.0, np.nan, 0.0])}, AdamState())


def test_step_clears_gradients():
    w = Tensor(np.ones(2), requires_grad=True)
    with T.Tape():
        loss = T.reduce_sum(T.mul(w, w))
    T.backward(loss)
    losses.step({"w": w}, AdamState())
    assert w.grad is None


# --------------------------------------------------------- class weights


def star(idx, labels):
    nodes = [(0, 0, (0.1, 0.1, 0.9, 0.9))] + [(i + 1, 1, (0.1, 0.1, 0.2, 0.2)) for i in range(len(labels))]
    return SceneAnnotation(f"s{idx}", tuple(nodes), tuple((0, i + 1, k) for i, k in enumerate(labels)))


def test_class_weights_balanced():
    scenes = [star(k, [k]) for k in range(12)]
    w, absent = losses.class_weights_from_frequency(scenes)
    np.testing.assert_allclose(w, np.ones(12))
    assert not absent.any()


def test_class_weights_ratio():
    scenes = [star(0, [0]), star(1, [0]), star(2, [1])]
    w, absent = losses.class_weights_from_frequency(scenes)
    assert w[1] / w[0] == pytest.approx(2.0)
    assert absent[2:].all() and (w[2:] == 1.0).all()


def test_class_weights_generator_counting():
    manifest, _ = data.generate_dataset(data.GeneratorConfig(seed=7, num_scenes=100, feature_dim=2))
    counts = [0] * 12
    for s in manifest.scenes:
        for v in range(s.num_nodes):
            carried = {e.label for e in s.edges if v in (e.a, e.b)}
            for k in carried:
                counts[k] += 1
    inv = [1.0 / c for c in counts if c]
    mean = sum(inv) / len(inv)
    want = [(1.0 / c) / mean if c else 1.0 for c in counts]
    w, _ = losses.class_weights_from_frequency(manifest.scenes)
    np.testing.assert_allclose(w, want, rtol=1e-13)


def test_class_weights_empty():
    with pytest.raises(DataError):
        losses.class_weights_from_frequency([])


# ------------------------------------------------------------- overfit


@pytest.mark.slow
def test_overfit_tiny_batch_default_config():
    manifest, raws = data.generate_dataset(data.GeneratorConfig(seed=0, num_scenes=2))
    cfg = model.GpnnConfig()
    params = model.init_params(cfg, seed=0)
    state = AdamState()
    batch = [(r, ground_truth_targets(s)) for r, s in zip(raws, manifest.scenes)]
    history = []
    for _ in range(200):
        total = 0.0
        for rec, (adj, lab) in batch:
            with T.Tape():
                out = model.forward(Tensor(rec.node_features), Tensor(rec.edge_features), params, cfg)
                loss = total_loss(out, adj, lab)["total"]
            T.backward(loss)
            losses.step(params, state)
            total += loss.item()
        history.append(total / len(batch))
    assert history[-1] < 0.5 * history[0]

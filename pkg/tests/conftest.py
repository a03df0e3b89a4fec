import numpy as np
import pytest

from sgnet import losses, model
from sgnet.graph import FeatureRecord, SceneAnnotation
from sgnet.tensor import Tensor


def random_record(n: int, d: int, rng: np.random.Generator, scale: float = 2.0) -> FeatureRecord:
    nodes = rng.uniform(-scale, scale, (n, d))
    edges = rng.uniform(-scale, scale, (n, n, d))
    edges = (edges + edges.transpose(1, 0, 2)) / 2.0
    edges[np.arange(n), np.arange(n)] = 0.0
    return FeatureRecord(nodes, edges)


def perturbed_params(cfg: model.GpnnConfig, seed: int, noise: float = 0.3) -> model.Params:
    """Random weights with non-zero biases so every parameter matters."""
    rng = np.random.default_rng(seed + 1000)
    params = model.init_params(cfg, seed=seed)
    for p in params.values():
        p.data += rng.normal(0.0, noise, p.shape)
    return params


@pytest.fixture
def small_cfg():
    return model.GpnnConfig(feature_dim=8, hidden_dim=6, readout_dim=6)


@pytest.fixture
def star_scene():
    # tissue at index 0, three instruments; two interact
    return SceneAnnotation(
        "star",
        (
            (0, 0, (0.2, 0.2, 0.7, 0.7)),
            (1, 1, (0.1, 0.1, 0.3, 0.3)),
            (2, 4, (0.5, 0.5, 0.8, 0.9)),
            (3, 6, (0.0, 0.6, 0.2, 0.9)),
        ),
        ((0, 1, 0), (0, 2, 4)),
    )


def pipeline_loss(record: FeatureRecord, params, cfg, adjacency_targets, label_targets, loss_cfg=None):
    loss_cfg = loss_cfg or losses.LossConfig()

    def f():
        out = model.forward(Tensor(record.node_features), Tensor(record.edge_features), params, cfg)
        return losses.total_loss(out, adjacency_targets, label_targets, loss_cfg)["total"]

    return f


# One line per acceptance criterion, printed at the end of the run.
ACCEPTANCE: list[str] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE.append(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    assert passed, f"{name}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)

"""Label-smoothed classifier training and penultimate-layer feature extraction.

A two-layer perceptron is trained with label-smoothed cross-entropy; its
hidden (penultimate) activations become the node and edge features fed to
the graph network.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from . import tensor as T
from .errors import ConfigError, ContractError, DataError, DimensionError
from .graph import FEATURE_DIM
from .losses import AdamState, step
from .tensor import Tensor

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class SmoothingConfig:
    epsilon: float = 0.1
    num_classes: int = 2

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.num_classes < 2:
            raise ConfigError("label smoothing needs at least two classes")


@dataclass
class ClassifierParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def num_classes(self) -> int:
        return self.w2.shape[1]

    def as_dict(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    @classmethod
    def init(cls, input_dim: int, num_classes: int, feature_dim: int = FEATURE_DIM, seed: int = 0):
        rng = np.random.default_rng(seed)
        b1 = np.sqrt(6.0 / (input_dim + feature_dim))
        b2 = np.sqrt(6.0 / (feature_dim + num_classes))
        return cls(
            Tensor(rng.uniform(-b1, b1, (input_dim, feature_dim)), requires_grad=True),
            Tensor(np.zeros(feature_dim), requires_grad=True),
            Tensor(rng.uniform(-b2, b2, (feature_dim, num_classes)), requires_grad=True),
            Tensor(np.zeros(num_classes), requires_grad=True),
        )


def smooth_labels(onehot, cfg: SmoothingConfig) -> np.ndarray:
    """T * (1 - eps) + eps / K."""
    t = np.asarray(onehot, dtype=np.float64)
    if t.shape != (cfg.num_classes,) or not np.isin(t, (0.0, 1.0)).all() or t.sum() != 1.0:
        raise ContractError(f"expected a one-hot vector of length {cfg.num_classes}")
    return t * (1.0 - cfg.epsilon) + cfg.epsilon / cfg.num_classes


def smoothed_targets(class_ids, cfg: SmoothingConfig) -> np.ndarray:
    """Row-wise smoothed targets for a batch of integer labels."""
    ids = np.asarray(class_ids, dtype=np.intp)
    out = np.full((ids.size, cfg.num_classes), cfg.epsilon / cfg.num_classes)
    out[np.arange(ids.size), ids] += 1.0 - cfg.epsilon
    return out


def ls_cross_entropy(pred_probs: Tensor, target_ls) -> Tensor:
    """sum_k -T_k log P_k, averaged over rows when given a batch.

    Probabilities are clamped at 1e-12 before the log.
    """
    target = np.asarray(target_ls, dtype=np.float64)
    if pred_probs.shape != target.shape:
        raise DimensionError(f"predictions {pred_probs.shape} vs targets {target.shape}")
    if (pred_probs.data < 0).any():
        raise ContractError("probabilities must be non-negative")
    rows = 1 if target.ndim == 1 else target.shape[0]
    terms = T.mul(T.log(pred_probs, floor=PROB_FLOOR), Tensor._wrap(target))
    return T.mul(T.reduce_sum(terms), -1.0 / rows)


def logits(params: ClassifierParams, x: Tensor) -> Tensor:
    return T.linear(penultimate(params, x), params.w2, params.b2)


def penultimate(params: ClassifierParams, x: Tensor) -> Tensor:
    return T.relu(T.linear(x, params.w1, params.b1))


def dataset_loss(params: ClassifierParams, x: np.ndarray, y: np.ndarray, cfg: SmoothingConfig) -> float:
    with T.no_grad():
        probs = T.softmax(logits(params, Tensor(x)))
        return ls_cross_entropy(probs, smoothed_targets(y, cfg)).item()


def train_classifier(
    inputs: np.ndarray,
    labels: np.ndarray,
    cfg: SmoothingConfig,
    epochs: int = 20,
    lr: float = 1e-3,
    batch_size: int = 64,
    feature_dim: int = FEATURE_DIM,
    seed: int = 0,
) -> tuple[ClassifierParams, list[float]]:
    """Mini-batch Adam on label-smoothed cross-entropy.

    Returns the parameters and the full-dataset loss before training and
    after every epoch.
    """
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DataError("classifier training needs a non-empty (samples, dim) array")
    if y.shape != (x.shape[0],):
        raise DimensionError(f"{x.shape[0]} samples but labels of shape {y.shape}")
    if y.min() < 0 or y.max() >= cfg.num_classes:
        raise DataError(f"labels must lie in [0, {cfg.num_classes})")
    rng = np.random.default_rng(seed)
    params = ClassifierParams.init(x.shape[1], cfg.num_classes, feature_dim, seed=seed)
    named = params.as_dict()
    state = AdamState(lr=lr)
    targets = smoothed_targets(y, cfg)
    history = [dataset_loss(params, x, y, cfg)]
    for epoch in range(epochs):
        order = rng.permutation(x.shape[0])
        for start in range(0, x.shape[0], batch_size):
            idx = order[start : start + batch_size]
            with T.Tape():
                probs = T.softmax(logits(params, Tensor._wrap(x[idx])))
                loss = ls_cross_entropy(probs, targets[idx])
            T.backward(loss)
            step(named, state)
        history.append(dataset_loss(params, x, y, cfg))
        logger.debug("classifier epoch %d loss %.6f", epoch + 1, history[-1])
    return params, history


def extract_features(params: ClassifierParams, inputs) -> np.ndarray:
    """Penultimate activations for one vector or a batch of row vectors."""
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise DimensionError(f"input of shape {np.shape(inputs)} does not match classifier width {params.input_dim}")
    with T.no_grad():
        out = penultimate(params, Tensor._wrap(x)).data
    return out[0] if single else out


def cluster_compactness(features, classes) -> float:
    """Mean within-class pairwise distance over mean distance between class centroids.

    Within-class distance is averaged per class, then across classes.
    Lower means tighter clusters. Returns 0 when every centroid coincides.
    """
    x = np.asarray(features, dtype=np.float64)
    c = np.asarray(classes)
    labels = np.unique(c)
    if labels.size < 2:
        raise DataError("compactness needs at least two classes")
    intra, centroids = [], []
    for label in labels:
        pts = x[c == label]
        if pts.shape[0] < 2:
            raise DataError(f"class {label} has fewer than two samples")
        intra.append(pdist(pts).mean())
        centroids.append(pts.mean(axis=0))
    cen = np.asarray(centroids)
    inter = pdist(cen).mean()
    if inter == 0.0:
        return 0.0
    return float(np.mean(intra) / inter)

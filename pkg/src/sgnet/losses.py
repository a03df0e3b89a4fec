"""Training objectives and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DataError, DimensionError, NumericError
from .graph import NUM_INTERACTIONS, SceneAnnotation, ground_truth_targets, upper_pairs
from .tensor import Tensor

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    class_weights: tuple[float, ...] = (1.0,) * NUM_INTERACTIONS
    margin: float = 1.0
    adjacency_loss_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
        if len(self.class_weights) != NUM_INTERACTIONS:
            raise ConfigError(f"need {NUM_INTERACTIONS} class weights, got {len(self.class_weights)}")
        if any(w <= 0 for w in self.class_weights):
            raise ConfigError("class weights must be positive")


def _binary(targets: np.ndarray) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.float64)
    if not np.isin(targets, (0.0, 1.0)).all():
        raise ContractError("targets must be binary (0/1)")
    return targets


def hinge_loss(scores: Tensor, targets: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    """Class-weighted multi-label hinge, averaged over nodes.

    ``scores`` are pre-sigmoid (n, 12); a 0/1 target maps to a -1/+1 sign.
    """
    targets = _binary(targets)
    if scores.shape != targets.shape or scores.ndim != 2:
        raise DimensionError(f"scores {scores.shape} and targets {targets.shape} differ")
    n = scores.shape[0]
    signs = Tensor._wrap(2.0 * targets - 1.0)
    slack = T.relu(T.add(T.neg(T.mul(signs, scores)), cfg.margin))
    weights = Tensor._wrap(np.tile(np.asarray(cfg.class_weights), (n, 1)))
    return T.mul(T.reduce_sum(T.mul(slack, weights)), 1.0 / n)


def adjacency_loss(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over the strict upper triangle."""
    targets = _binary(targets)
    n = probs.shape[0]
    if probs.shape != (n, n) or targets.shape != (n, n):
        raise DimensionError(f"adjacency {probs.shape} / targets {targets.shape} are not square and equal")
    if not np.array_equal(probs.data, probs.data.T) or not np.array_equal(targets, targets.T):
        raise ContractError("adjacency inputs must be symmetric")
    a, b = upper_pairs(n)
    if a.size == 0:
        raise DataError("adjacency loss needs at least two nodes")
    p = T.take_rows(T.reshape(probs, (n * n,)), a * n + b)
    t = targets[a, b]
    pos = T.mul(T.log(p, floor=PROB_FLOOR), Tensor._wrap(t))
    neg = T.mul(T.log(T.add(T.neg(p), 1.0), floor=PROB_FLOOR), Tensor._wrap(1.0 - t))
    return T.mul(T.reduce_sum(T.add(pos, neg)), -1.0 / a.size)


def total_loss(
    outputs: Mapping[str, Tensor],
    adjacency_targets: np.ndarray,
    label_targets: np.ndarray,
    cfg: LossConfig = LossConfig(),
) -> dict[str, Tensor]:
    """Hinge on node scores plus weighted adjacency BCE; returns all three terms."""
    hinge = hinge_loss(outputs["scores"], label_targets, cfg)
    adj = adjacency_loss(outputs["adjacency"], adjacency_targets)
    return {"total": T.add(hinge, T.mul(adj, cfg.adjacency_loss_weight)), "hinge": hinge, "adjacency": adj}


def class_weights_from_frequency(scenes: Iterable[SceneAnnotation]) -> tuple[np.ndarray, np.ndarray]:
    """Inverse node-level label frequency, normalized to mean 1 over present classes.

    Returns ``(weights, absent)`` where ``absent[k]`` flags classes with no
    positive; those get weight 1.
    """
    counts = np.zeros(NUM_INTERACTIONS)
    seen = 0
    for scene in scenes:
        seen += 1
        counts += ground_truth_targets(scene)[1].sum(axis=0)
    if seen == 0:
        raise DataError("cannot derive class weights from an empty dataset")
    absent = counts == 0
    weights = np.ones(NUM_INTERACTIONS)
    if (~absent).any():
        inv = 1.0 / counts[~absent]
        weights[~absent] = inv / inv.mean()
    return weights, absent


@dataclass
class AdamState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: AdamState,
) -> None:
    """One bias-corrected Adam update, in place. Missing gradients count as zero.

    Bias corrections are folded into the step size and epsilon,
    lr * sqrt(1 - b2^t) / (1 - b1^t) and eps * sqrt(1 - b2^t), which is the
    same update as dividing m and v by their corrections.
    """
    checked = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        elif g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        elif not np.isfinite(g.sum()) and not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
        checked[name] = g
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    root_bc2 = np.sqrt(1.0 - state.beta2**state.t)
    step_size = state.lr * root_bc2 / bc1
    eps_hat = state.eps * root_bc2
    for name, p in params.items():
        g = checked[name]
        if name not in state.m:
            state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        m, v = state.m[name], state.v[name]
        tmp = np.empty_like(m)
        np.multiply(g, 1.0 - state.beta1, out=tmp)
        m *= state.beta1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - state.beta2
        v *= state.beta2
        v += tmp
        np.sqrt(v, out=tmp)
        tmp += eps_hat
        np.divide(m, tmp, out=tmp)
        tmp *= step_size
        p.data -= tmp


def step(params: Mapping[str, Tensor], state: AdamState) -> None:
    """Apply Adam with each parameter's ``.grad`` and clear the gradients."""
    adam_step(params, {k: p.grad for k, p in params.items()}, state)
    for p in params.values():
        p.grad = None

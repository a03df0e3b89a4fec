"""mAP, recall, AUC and hinge evaluation over pooled (node, class) predictions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, DimensionError
from .graph import INTERACTION_NAMES, FeatureRecord, SceneAnnotation, ground_truth_targets
from .losses import LossConfig, hinge_loss
from .model import GpnnConfig, Params, infer
from .tensor import Tensor


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mean of precision@rank taken at each positive; no interpolation.

    Sorting is stable, so tied scores keep their input order. The mean uses
    a correctly rounded sum so the result does not depend on summation order.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise DimensionError(f"{s.size} scores but {y.size} labels")
    if not y.any():
        raise DataError("average precision is undefined without positives")
    ranked = y[np.argsort(-s, kind="stable")]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, ranked.size + 1)
    return math.fsum(hits[ranked] / ranks[ranked]) / int(hits[-1])


def per_class_ap(probs: np.ndarray, targets: np.ndarray) -> list[float | None]:
    probs, targets = _pooled(probs, targets)
    return [
        average_precision(probs[:, k], targets[:, k]) if targets[:, k].any() else None
        for k in range(probs.shape[1])
    ]


def mean_average_precision(probs: np.ndarray, targets: np.ndarray) -> float:
    aps = [ap for ap in per_class_ap(probs, targets) if ap is not None]
    if not aps:
        raise DataError("no class has a positive example")
    return float(np.mean(aps))


def micro_recall(probs: np.ndarray, targets: np.ndarray, threshold: float = 0.5) -> float:
    probs, targets = _pooled(probs, targets)
    pos = targets.astype(bool)
    if not pos.any():
        raise DataError("recall is undefined without positives")
    tp = np.count_nonzero(probs[pos] >= threshold)
    return tp / np.count_nonzero(pos)


def binary_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney statistic with mid-ranks, so ties count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = np.count_nonzero(y), np.count_nonzero(~y)
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs both a positive and a negative")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_auc(probs: np.ndarray, targets: np.ndarray) -> float:
    probs, targets = _pooled(probs, targets)
    aucs = []
    for k in range(probs.shape[1]):
        col = targets[:, k].astype(bool)
        if col.any() and not col.all():
            aucs.append(binary_auc(probs[:, k], col))
    if not aucs:
        raise DataError("no class has both positives and negatives")
    return float(np.mean(aucs))


def _pooled(probs, targets) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probs, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionError(f"predictions {p.shape} and targets {t.shape} differ")
    if p.ndim == 1:
        p, t = p[:, None], t[:, None]
    return p, t


@dataclass
class EvalReport:
    per_class_ap: list[float | None]
    map: float
    recall: float
    auc: float
    mean_hinge: float
    counts: list[int]

    def to_dict(self) -> dict:
        return {
            "per_class_ap": list(self.per_class_ap),
            "map": self.map,
            "recall": self.recall,
            "auc": self.auc,
            "mean_hinge": self.mean_hinge,
            "counts": list(self.counts),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            per_class_ap=[None if v is None else float(v) for v in d["per_class_ap"]],
            map=float(d["map"]),
            recall=float(d["recall"]),
            auc=float(d["auc"]),
            mean_hinge=float(d["mean_hinge"]),
            counts=[int(c) for c in d["counts"]],
        )

    def render(self, name: str = "model") -> str:
        """Aligned table with the mAP / Hinge / Recall / AUC columns."""
        width = max(len(name), len("Models"))
        lines = [
            f"{'Models':<{width}} | {'mAP':>7} | {'Hinge':>7} | {'Recall':>7} | {'AUC':>7}",
            f"{name:<{width}} | {self.map:7.4f} | {self.mean_hinge:7.2f} | {self.recall:7.4f} | {self.auc:7.4f}",
            "",
            "per-class AP:",
        ]
        for label, ap, count in zip(INTERACTION_NAMES, self.per_class_ap, self.counts):
            shown = "   n/a" if ap is None else f"{ap:.4f}"
            lines.append(f"  {label:<20} {shown}  (positives: {count})")
        return "\n".join(lines)


def evaluate(
    params: Params,
    cfg: GpnnConfig,
    records: Iterable[FeatureRecord],
    scenes: Iterable[SceneAnnotation],
    loss_cfg: LossConfig = LossConfig(),
) -> EvalReport:
    """Infer every scene, pool node predictions and compute all metrics."""
    probs, targets, hinges = [], [], []
    for record, scene in zip(records, scenes, strict=True):
        state = infer(record, params, cfg)
        labels = ground_truth_targets(scene)[1]
        probs.append(state.node_probs)
        targets.append(labels)
        hinges.append(hinge_loss(Tensor._wrap(state.node_scores), labels, loss_cfg).item())
    if not probs:
        raise DataError("cannot evaluate an empty split")
    p = np.concatenate(probs)
    t = np.concatenate(targets)
    return EvalReport(
        per_class_ap=per_class_ap(p, t),
        map=mean_average_precision(p, t),
        recall=micro_recall(p, t),
        auc=macro_auc(p, t),
        mean_hinge=float(np.mean(hinges)),
        counts=[int(c) for c in t.sum(axis=0)],
    )


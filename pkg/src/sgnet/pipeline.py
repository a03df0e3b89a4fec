"""End-to-end training: feature extractors, graph network, checkpoints.

Raw generator vectors are never fed to the graph network directly. Two
classifiers are trained first, one over node classes and one over the 12
interaction classes plus background; their penultimate activations are the
node and edge features the graph network sees.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import data
from . import tensor as T
from .errors import DataError, NumericError
from .features import ClassifierParams, SmoothingConfig, cluster_compactness, extract_features, train_classifier
from .graph import NUM_INTERACTIONS, NUM_NODE_CLASSES, FeatureRecord, SceneAnnotation, ground_truth_targets
from .losses import AdamState, LossConfig, class_weights_from_frequency, step, total_loss
from .metrics import EvalReport, evaluate
from .model import GpnnConfig, Params, forward, init_params
from .tensor import Tensor

logger = logging.getLogger(__name__)

BACKGROUND = NUM_INTERACTIONS  # edge-classifier class for "no interaction"

ABLATION_ROWS = (
    # (label, use_ls, use_attention, use_sageconv), ordered as the ablation table
    ("Base+LS+Attention+SageConv", True, True, True),
    ("Base+LS+Attention", True, True, False),
    ("Base+LS", True, False, False),
    ("Base", False, False, False),
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-5
    ls_epsilon: float = 0.1
    use_ls: bool = True
    use_attention: bool = True
    use_sageconv: bool = True
    seed: int = 0
    hidden_dim: int = 128
    propagation_steps: int = 3
    classifier_epochs: int = 20
    classifier_lr: float = 1e-3
    weighted_loss: bool = True

    @property
    def epsilon(self) -> float:
        return self.ls_epsilon if self.use_ls else 0.0


@dataclass
class ModelBundle:
    """Everything needed to go from raw scene vectors to a parse graph."""

    node_classifier: ClassifierParams
    edge_classifier: ClassifierParams
    params: Params
    gpnn: GpnnConfig
    loss: LossConfig = field(default_factory=LossConfig)
    meta: dict = field(default_factory=dict)

    def extract(self, raw: FeatureRecord) -> FeatureRecord:
        return extract_record(self.node_classifier, self.edge_classifier, raw)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"gpnn.{k}": v.data for k, v in self.params.items()}
        out.update({f"node_clf.{k}": v.data for k, v in self.node_classifier.as_dict().items()})
        out.update({f"edge_clf.{k}": v.data for k, v in self.edge_classifier.as_dict().items()})
        return out

    def save(self, path) -> None:
        meta = {
            "gpnn_config": self.gpnn.to_dict(),
            "loss_config": asdict(self.loss),
            "extra": self.meta,
        }
        data.save_checkpoint(path, self.tensors(), meta)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        tensors, meta = data.load_checkpoint(path)
        return cls.from_tensors(tensors, meta)

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], meta: dict) -> "ModelBundle":
        def group(prefix):
            return {k[len(prefix) :]: Tensor(v, requires_grad=True) for k, v in tensors.items() if k.startswith(prefix)}

        try:
            loss = meta["loss_config"]
            return cls(
                node_classifier=ClassifierParams(**group("node_clf.")),
                edge_classifier=ClassifierParams(**group("edge_clf.")),
                params=group("gpnn."),
                gpnn=GpnnConfig.from_dict(meta["gpnn_config"]),
                loss=LossConfig(tuple(loss["class_weights"]), loss["margin"], loss["adjacency_loss_weight"]),
                meta=meta.get("extra", {}),
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"checkpoint is missing model content: {exc!r}") from None


def extract_record(node_clf: ClassifierParams, edge_clf: ClassifierParams, raw: FeatureRecord) -> FeatureRecord:
    n = raw.num_nodes
    nodes = extract_features(node_clf, raw.node_features)
    edges = np.zeros((n, n, edge_clf.feature_dim))
    a, b = np.triu_indices(n, k=1)
    if a.size:
        pair = extract_features(edge_clf, raw.edge_features[a, b])
        edges[a, b] = pair
        edges[b, a] = pair
    return FeatureRecord(nodes, edges)


def classifier_samples(
    scenes: Sequence[SceneAnnotation], raws: Sequence[FeatureRecord]
) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """(node inputs, node classes), (edge inputs, interaction-or-background classes)."""
    node_x, node_y, edge_x, edge_y = [], [], [], []
    for scene, raw in zip(scenes, raws, strict=True):
        node_x.append(raw.node_features)
        node_y.extend(n.class_id for n in scene.nodes)
        first_label = {}
        for e in scene.edges:
            first_label.setdefault((min(e.a, e.b), max(e.a, e.b)), e.label)
        a, b = np.triu_indices(scene.num_nodes, k=1)
        edge_x.append(raw.edge_features[a, b])
        edge_y.extend(first_label.get((i, j), BACKGROUND) for i, j in zip(a.tolist(), b.tolist()))
    return (
        (np.concatenate(node_x), np.asarray(node_y)),
        (np.concatenate(edge_x), np.asarray(edge_y)),
    )


def fit_extractors(
    scenes: Sequence[SceneAnnotation], raws: Sequence[FeatureRecord], cfg: TrainConfig
) -> tuple[ClassifierParams, ClassifierParams]:
    (nx, ny), (ex, ey) = classifier_samples(scenes, raws)
    node_clf, node_hist = train_classifier(
        nx, ny, SmoothingConfig(cfg.epsilon, NUM_NODE_CLASSES), cfg.classifier_epochs, cfg.classifier_lr, seed=cfg.seed
    )
    edge_clf, edge_hist = train_classifier(
        ex, ey, SmoothingConfig(cfg.epsilon, NUM_INTERACTIONS + 1), cfg.classifier_epochs, cfg.classifier_lr,
        seed=cfg.seed + 1,
    )
    logger.info("node classifier loss %.4f -> %.4f", node_hist[0], node_hist[-1])
    logger.info("edge classifier loss %.4f -> %.4f", edge_hist[0], edge_hist[-1])
    return node_clf, edge_clf


@dataclass
class EpochLog:
    epoch: int
    total: float
    hinge: float
    adjacency: float


def train(
    manifest: data.DatasetManifest,
    raws: Sequence[FeatureRecord],
    cfg: TrainConfig = TrainConfig(),
    on_epoch: Callable[[EpochLog], None] | None = None,
    until: Callable[[ModelBundle], bool] | None = None,
) -> tuple[ModelBundle, list[EpochLog]]:
    """Fit extractors then the graph network on the manifest's train split.

    Graph parameters are updated after every scene. ``until`` is called
    with the current bundle after each epoch; returning True ends training
    early. Raises :class:`NumericError` if a loss turns non-finite.
    """
    train_idx = manifest.indices_in("train")
    if not train_idx:
        raise DataError("manifest has no training scenes")
    scenes = [manifest.scenes[i] for i in train_idx]
    train_raw = [raws[i] for i in train_idx]
    node_clf, edge_clf = fit_extractors(scenes, train_raw, cfg)
    records = [extract_record(node_clf, edge_clf, r) for r in train_raw]
    targets = [ground_truth_targets(s) for s in scenes]

    weights = class_weights_from_frequency(scenes)[0] if cfg.weighted_loss else np.ones(NUM_INTERACTIONS)
    loss_cfg = LossConfig(tuple(weights))
    gcfg = GpnnConfig(
        feature_dim=node_clf.feature_dim,
        hidden_dim=cfg.hidden_dim,
        readout_dim=cfg.hidden_dim,
        propagation_steps=cfg.propagation_steps,
        use_attention=cfg.use_attention,
        use_sageconv=cfg.use_sageconv,
    )
    params = init_params(gcfg, seed=cfg.seed)
    bundle = ModelBundle(
        node_clf, edge_clf, params, gcfg, loss_cfg,
        meta={"train_config": asdict(cfg), "generator_seed": manifest.generator_seed},
    )
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 3])
    history: list[EpochLog] = []
    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(3)
        for i in rng.permutation(len(records)):
            rec = records[i]
            with T.Tape():
                out = forward(Tensor._wrap(rec.node_features), Tensor._wrap(rec.edge_features), params, gcfg)
                losses = total_loss(out, targets[i][0], targets[i][1], loss_cfg)
            T.backward(losses["total"])
            step(params, state)
            sums += [losses["total"].item(), losses["hinge"].item(), losses["adjacency"].item()]
        mean = sums / len(records)
        if not np.isfinite(mean).all():
            raise NumericError(f"training diverged at epoch {epoch}")
        entry = EpochLog(epoch, *map(float, mean))
        history.append(entry)
        logger.info("epoch %d total %.5f hinge %.5f adjacency %.5f", epoch, *mean)
        if on_epoch is not None:
            on_epoch(entry)
        if until is not None and until(bundle):
            break
    return bundle, history


def untrained_bundle(raws: Sequence[FeatureRecord], cfg: TrainConfig = TrainConfig(), zero: bool = True) -> ModelBundle:
    """A bundle with zero (or freshly initialized) weights everywhere."""
    d_in = raws[0].dim
    node_clf = ClassifierParams.init(d_in, NUM_NODE_CLASSES, seed=cfg.seed)
    edge_clf = ClassifierParams.init(d_in, NUM_INTERACTIONS + 1, seed=cfg.seed + 1)
    gcfg = GpnnConfig(hidden_dim=cfg.hidden_dim, readout_dim=cfg.hidden_dim, propagation_steps=cfg.propagation_steps,
                      use_attention=cfg.use_attention, use_sageconv=cfg.use_sageconv)
    params = init_params(gcfg, seed=cfg.seed, zero=zero)
    if zero:
        for clf in (node_clf, edge_clf):
            for t in clf.as_dict().values():
                t.data[...] = 0.0
    return ModelBundle(node_clf, edge_clf, params, gcfg)


def evaluate_bundle(
    bundle: ModelBundle, manifest: data.DatasetManifest, raws: Sequence[FeatureRecord], split: str = "val"
) -> EvalReport:
    idx = manifest.indices_in(split) if split != "all" else list(range(len(manifest.scenes)))
    if not idx:
        raise DataError(f"split {split!r} is empty")
    records = [bundle.extract(raws[i]) for i in idx]
    return evaluate(bundle.params, bundle.gpnn, records, [manifest.scenes[i] for i in idx], bundle.loss)


def is_finite_history(history: Sequence[EpochLog]) -> bool:
    return all(math.isfinite(h.total) for h in history)


def run_ablation(manifest, raws, seeds, epochs, base_cfg: TrainConfig | None = None) -> dict:
    """Train and evaluate the four ablation configurations for every seed."""
    base_cfg = base_cfg or TrainConfig()
    results = {}
    for label, use_ls, use_att, use_sage in ABLATION_ROWS:
        rows = []
        for seed in seeds:
            cfg = replace(base_cfg, epochs=epochs, seed=seed, use_ls=use_ls,
                          use_attention=use_att, use_sageconv=use_sage)
            bundle, _ = train(manifest, raws, cfg)
            report = evaluate_bundle(bundle, manifest, raws, "val")
            rows.append({"seed": seed, "map": report.map, "hinge": report.mean_hinge,
                         "auc": report.auc, "recall": report.recall})
            logger.info("%s seed %d: mAP %.4f", label, seed, report.map)
        results[label] = rows
    return results


def compactness_pair(manifest, raws, seed: int, epsilon: float = 0.1, epochs: int = 20) -> tuple[float, float]:
    """Node-feature compactness with and without label smoothing for one seed."""
    idx = manifest.indices_in("train")
    (x, y), _ = classifier_samples([manifest.scenes[i] for i in idx], [raws[i] for i in idx])
    vidx = manifest.indices_in("val")
    (vx, vy), _ = classifier_samples([manifest.scenes[i] for i in vidx], [raws[i] for i in vidx])
    # compactness needs two samples per class; rare classes in a small split are dropped
    labels, counts = np.unique(vy, return_counts=True)
    keep = np.isin(vy, labels[counts >= 2])
    out = []
    for eps in (epsilon, 0.0):
        clf, _ = train_classifier(x, y, SmoothingConfig(eps, NUM_NODE_CLASSES), epochs=epochs, seed=seed)
        out.append(cluster_compactness(extract_features(clf, vx[keep]), vy[keep]))
    return out[0], out[1]

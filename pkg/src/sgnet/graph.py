"""Scene annotations, feature records and parse-graph state.

A scene is a star around a single tissue node: instruments interact only
with the tissue, never with each other. Interaction labels are attached to
undirected edges; for training they are mirrored onto both endpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .errors import DataError

TISSUE_CLASS = 0

# Stable ids; never reorder, checkpoints and files store the integers.
NODE_CLASS_NAMES: tuple[str, ...] = (
    "kidney",
    "bipolar_forceps",
    "prograsp_forceps",
    "large_needle_driver",
    "monopolar_curved_scissors",
    "ultrasound_probe",
    "suction_instrument",
    "clip_applier",
    "stapler",
)

INTERACTION_NAMES: tuple[str, ...] = (
    "grasping",
    "retraction",
    "tissue manipulation",
    "tool manipulation",
    "cutting",
    "cauterization",
    "suction",
    "looping",
    "suturing",
    "clipping",
    "staple",
    "ultrasound sensing",
)

NUM_NODE_CLASSES = len(NODE_CLASS_NAMES)
NUM_INTERACTIONS = len(INTERACTION_NAMES)
FEATURE_DIM = 200


@lru_cache(maxsize=64)
def upper_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Row and column indices of the strict upper triangle, cached and read-only."""
    a, b = np.triu_indices(n, k=1)
    a.flags.writeable = False
    b.flags.writeable = False
    return a, b


@dataclass(frozen=True)
class NodeClass:
    id: int
    name: str

    @classmethod
    def from_id(cls, class_id: int) -> "NodeClass":
        return cls(class_id, NODE_CLASS_NAMES[class_id])

    @property
    def is_tissue(self) -> bool:
        return self.id == TISSUE_CLASS


@dataclass(frozen=True)
class InteractionLabel:
    id: int
    name: str

    @classmethod
    def from_id(cls, label_id: int) -> "InteractionLabel":
        return cls(label_id, INTERACTION_NAMES[label_id])

    @classmethod
    def from_name(cls, name: str) -> "InteractionLabel":
        return cls(INTERACTION_NAMES.index(name), name)


class SceneNode(NamedTuple):
    index: int
    class_id: int
    box: tuple[float, float, float, float]


class SceneEdge(NamedTuple):
    a: int
    b: int
    label: int


@dataclass(frozen=True)
class SceneAnnotation:
    scene_id: str
    nodes: tuple[SceneNode, ...]
    edges: tuple[SceneEdge, ...] = ()
    feature_ref: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(SceneNode(*n) for n in self.nodes))
        object.__setattr__(self, "edges", tuple(SceneEdge(*e) for e in self.edges))

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def tissue_index(self) -> int | None:
        hits = [n.index for n in self.nodes if n.class_id == TISSUE_CLASS]
        return hits[0] if len(hits) == 1 else None


@dataclass(frozen=True, eq=False)
class FeatureRecord:
    """Per-scene features: ``node_features`` is (n, d), ``edge_features`` (n, n, d)."""

    node_features: np.ndarray
    edge_features: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def dim(self) -> int:
        return self.node_features.shape[1]

    def check(self) -> None:
        nf, ef = self.node_features, self.edge_features
        n, d = nf.shape
        if ef.shape != (n, n, d):
            raise DataError(f"edge features {ef.shape} do not match node features {nf.shape}")
        if not (np.isfinite(nf).all() and np.isfinite(ef).all()):
            raise DataError("feature record holds non-finite values")
        if not np.array_equal(ef, ef.transpose(1, 0, 2)):
            raise DataError("edge features are not symmetric")
        if np.any(ef[np.arange(n), np.arange(n)]):
            raise DataError("edge features must be zero on the diagonal")

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureRecord):
            return NotImplemented
        return np.array_equal(self.node_features, other.node_features) and np.array_equal(
            self.edge_features, other.edge_features
        )


@dataclass
class ParseGraphState:
    """Result of inference on one scene."""

    adjacency: np.ndarray
    hidden: np.ndarray
    node_probs: np.ndarray
    node_scores: np.ndarray = field(repr=False)

    def predicted_edges(self, threshold: float = 0.5) -> list[tuple[int, int]]:
        n = self.adjacency.shape[0]
        return [(a, b) for a in range(n) for b in range(a + 1, n) if self.adjacency[a, b] >= threshold]


def validate(scene: SceneAnnotation) -> list[str]:
    """Return a list of human-readable rule violations (empty when valid)."""
    problems: list[str] = []
    n = len(scene.nodes)
    for pos, node in enumerate(scene.nodes):
        if node.index != pos:
            problems.append(f"nodes[{pos}]: index {node.index} breaks contiguous 0..n-1 numbering")
        if not 0 <= node.class_id < NUM_NODE_CLASSES:
            problems.append(f"node {node.index}: unknown class id {node.class_id}")
        x1, y1, x2, y2 = node.box
        if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
            problems.append(f"node {node.index}: box {tuple(node.box)} violates 0<=x1<x2<=1, 0<=y1<y2<=1")
    tissue = [node.index for node in scene.nodes if node.class_id == TISSUE_CLASS]
    if len(tissue) != 1:
        problems.append(f"nodes: expected exactly one tissue node, found {len(tissue)}")
    seen: set[tuple[int, int, int]] = set()
    for a, b, label in scene.edges:
        if a == b:
            problems.append(f"self-edge at pair ({a},{b})")
            continue
        if not (0 <= a < n and 0 <= b < n):
            problems.append(f"edge ({a},{b}): endpoint out of range 0..{n - 1}")
            continue
        if not 0 <= label < NUM_INTERACTIONS:
            problems.append(f"edge ({a},{b}): unknown interaction label {label}")
        if len(tissue) == 1 and tissue[0] not in (a, b):
            problems.append(f"edge ({a},{b}): neither endpoint is the tissue node")
        key = (min(a, b), max(a, b), label)
        if key in seen:
            problems.append(f"edge ({a},{b}): duplicate label {label}")
        seen.add(key)
    return problems


def ground_truth_targets(scene: SceneAnnotation) -> tuple[np.ndarray, np.ndarray]:
    """Binary adjacency (n, n) and per-node multi-label targets (n, 12)."""
    problems = validate(scene)
    if problems:
        raise DataError(f"scene {scene.scene_id!r} is invalid: " + "; ".join(problems))
    n = scene.num_nodes
    adjacency = np.zeros((n, n))
    labels = np.zeros((n, NUM_INTERACTIONS))
    for a, b, label in scene.edges:
        adjacency[a, b] = adjacency[b, a] = 1.0
        labels[a, label] = labels[b, label] = 1.0
    return adjacency, labels

"""Synthetic scene generation, dataset splitting and on-disk formats.

File formats (all little-endian):

``*.sgm``  manifest, JSON text: ``{"format": "sgm", "format_version": 1, ...}``
``*.sgf``  features, a run of records ``b"SGF1" | u32 n | u32 d | f64[n*d] | f64[n*n*d]``
           (node features then edge features, row-major)
``*.sgc``  checkpoint ``b"SGC\\0" | u32 version | u32 header_len | JSON header | f64 tensors``
``*.sgr``  evaluation report, JSON text
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ConfigError, DataError, ParseError, VersionError
from .graph import (
    FEATURE_DIM,
    NUM_INTERACTIONS,
    NUM_NODE_CLASSES,
    TISSUE_CLASS,
    FeatureRecord,
    SceneAnnotation,
    SceneEdge,
    SceneNode,
    ground_truth_targets,
)

FORMAT_VERSION = 1
FEATURE_MAGIC = b"SGF1"
CHECKPOINT_MAGIC = b"SGC\x00"
EDGE_PROBABILITY = 0.7


@dataclass(frozen=True)
class DatasetManifest:
    scenes: tuple[SceneAnnotation, ...]
    split: dict[str, str] = field(default_factory=dict)
    generator_seed: int | None = None
    format_version: int = FORMAT_VERSION

    def scenes_in(self, part: str) -> list[SceneAnnotation]:
        return [s for s in self.scenes if self.split.get(s.scene_id) == part]

    def indices_in(self, part: str) -> list[int]:
        return [i for i, s in enumerate(self.scenes) if self.split.get(s.scene_id) == part]


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    num_scenes: int = 500
    instruments_per_scene: tuple[int, int] = (1, 5)
    interaction_noise: float = 0.05
    class_prior: tuple[float, ...] = (1.0 / NUM_INTERACTIONS,) * NUM_INTERACTIONS
    feature_dim: int = FEATURE_DIM
    train_fraction: float = 0.8

    def check(self) -> None:
        prior = np.asarray(self.class_prior, dtype=np.float64)
        if prior.shape != (NUM_INTERACTIONS,) or (prior < 0).any() or abs(prior.sum() - 1.0) > 1e-9:
            raise ConfigError("class_prior must hold 12 non-negative values summing to 1")
        if self.interaction_noise < 0:
            raise ConfigError("interaction_noise must be >= 0")
        lo, hi = self.instruments_per_scene
        if not 1 <= lo <= hi:
            raise ConfigError("instruments_per_scene must satisfy 1 <= low <= high")
        if self.num_scenes < 1 or self.feature_dim < 1:
            raise ConfigError("num_scenes and feature_dim must be positive")


@dataclass(frozen=True)
class Centroids:
    node: np.ndarray  # (NUM_NODE_CLASSES, d)
    interaction: np.ndarray  # (12, d)
    background: np.ndarray  # (d,)


def draw_centroids(seed: int, dim: int) -> Centroids:
    rng = np.random.default_rng([seed, 0])
    return Centroids(
        node=rng.standard_normal((NUM_NODE_CLASSES, dim)),
        interaction=rng.standard_normal((NUM_INTERACTIONS, dim)),
        background=rng.standard_normal(dim),
    )


def _random_box(rng: np.random.Generator, lo: float, hi: float) -> tuple[float, float, float, float]:
    w, h = rng.uniform(lo, hi, 2)
    x1 = rng.uniform(0.0, 1.0 - w)
    y1 = rng.uniform(0.0, 1.0 - h)
    return (float(x1), float(y1), float(x1 + w), float(y1 + h))


def generate_dataset(cfg: GeneratorConfig) -> tuple[DatasetManifest, list[FeatureRecord]]:
    """Deterministic tissue-centred scenes with class-conditioned Gaussian features."""
    cfg.check()
    cents = draw_centroids(cfg.seed, cfg.feature_dim)
    rng = np.random.default_rng([cfg.seed, 1])
    prior = np.asarray(cfg.class_prior, dtype=np.float64)
    sigma = cfg.interaction_noise
    d = cfg.feature_dim
    lo, hi = cfg.instruments_per_scene
    scenes, records = [], []
    for i in range(cfg.num_scenes):
        k = int(rng.integers(lo, hi + 1))
        classes = np.concatenate([[TISSUE_CLASS], rng.integers(1, NUM_NODE_CLASSES, size=k)])
        order = rng.permutation(k + 1)
        classes = classes[order]
        tissue = int(np.flatnonzero(classes == TISSUE_CLASS)[0])
        nodes = [
            SceneNode(v, int(c), _random_box(rng, 0.3, 0.6) if c == TISSUE_CLASS else _random_box(rng, 0.05, 0.3))
            for v, c in enumerate(classes)
        ]
        edges = []
        for v in range(k + 1):
            if v != tissue and rng.random() < EDGE_PROBABILITY:
                a, b = sorted((tissue, v))
                edges.append(SceneEdge(a, b, int(rng.choice(NUM_INTERACTIONS, p=prior))))
        n = k + 1
        node_feat = cents.node[classes] + sigma * rng.standard_normal((n, d))
        edge_feat = np.zeros((n, n, d))
        label_of = {(e.a, e.b): e.label for e in edges}
        for a in range(n):
            for b in range(a + 1, n):
                label = label_of.get((a, b))
                base = cents.background if label is None else cents.interaction[label]
                edge_feat[a, b] = edge_feat[b, a] = base + sigma * rng.standard_normal(d)
        scenes.append(SceneAnnotation(f"scene_{i:05d}", tuple(nodes), tuple(edges), f"features.sgf#{i}"))
        records.append(FeatureRecord(node_feat, edge_feat))
    manifest = DatasetManifest(tuple(scenes), generator_seed=cfg.seed)
    return split_dataset(manifest, cfg.train_fraction, cfg.seed), records


def split_dataset(manifest: DatasetManifest, train_fraction: float = 0.8, seed: int = 0) -> DatasetManifest:
    """Seeded train/val split in which train covers every class that has positives."""
    scenes = manifest.scenes
    if len(scenes) < 2:
        raise DataError("splitting needs at least two scenes")
    labels = np.array([ground_truth_targets(s)[1].any(axis=0) for s in scenes])
    needed = labels.any(axis=0)
    n_train = min(max(int(round(train_fraction * len(scenes))), 1), len(scenes) - 1)
    rng = np.random.default_rng([seed, 2])
    for _ in range(100):
        order = rng.permutation(len(scenes))
        train = order[:n_train]
        if (labels[train].any(axis=0) >= needed).all():
            chosen = set(train.tolist())
            split = {s.scene_id: "train" if i in chosen else "val" for i, s in enumerate(scenes)}
            return replace(manifest, split=split)
    raise DataError("could not draw a split whose training part covers every class")


# ---------------------------------------------------------------- text formats


def _atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _load_json(path: str | os.PathLike, kind: str) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed {kind} file: {exc.msg}", f"line {exc.lineno}:{exc.colno}") from None
    if not isinstance(doc, dict) or doc.get("format") != kind:
        raise ParseError(f"not a {kind} file", "line 1:1")
    if doc.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"unsupported {kind} version {doc.get('format_version')!r}")
    return doc


def dump_json(doc: dict) -> bytes:
    return (json.dumps(doc, indent=1, allow_nan=False) + "\n").encode("utf-8")


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    return {
        "format": "sgm",
        "format_version": manifest.format_version,
        "generator_seed": manifest.generator_seed,
        "scenes": [
            {
                "scene_id": s.scene_id,
                "nodes": [[n.index, n.class_id, list(n.box)] for n in s.nodes],
                "edges": [list(e) for e in s.edges],
                "feature_ref": s.feature_ref,
            }
            for s in manifest.scenes
        ],
        "split": dict(manifest.split),
    }


def manifest_from_dict(doc: dict) -> DatasetManifest:
    try:
        scenes = tuple(
            SceneAnnotation(
                s["scene_id"],
                tuple(SceneNode(int(i), int(c), tuple(float(x) for x in box)) for i, c, box in s["nodes"]),
                tuple(SceneEdge(int(a), int(b), int(lab)) for a, b, lab in s["edges"]),
                s.get("feature_ref"),
            )
            for s in doc["scenes"]
        )
        split = {str(k): str(v) for k, v in doc.get("split", {}).items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"manifest structure is invalid: {exc!r}") from None
    ids = {s.scene_id for s in scenes}
    if split and (set(split) != ids or not set(split.values()) <= {"train", "val"}):
        raise ParseError("split must assign every scene to train or val exactly once")
    return DatasetManifest(scenes, split, doc.get("generator_seed"), doc["format_version"])


def save_manifest(path, manifest: DatasetManifest) -> None:
    _atomic_write(path, dump_json(manifest_to_dict(manifest)))


def load_manifest(path) -> DatasetManifest:
    return manifest_from_dict(_load_json(path, "sgm"))


def save_report(path, report) -> None:
    doc = {"format": "sgr", "format_version": FORMAT_VERSION, **report.to_dict()}
    _atomic_write(path, dump_json(doc))


def load_report(path):
    from .metrics import EvalReport

    doc = _load_json(path, "sgr")
    try:
        return EvalReport.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"report structure is invalid: {exc!r}") from None


# ---------------------------------------------------------------- binary formats

_U32 = struct.Struct("<I")


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, count: int, what: str) -> bytes:
        if self.pos + count > len(self.buf):
            raise ParseError(f"truncated {what}: need {count} bytes", f"byte {self.pos}")
        out = self.buf[self.pos : self.pos + count]
        self.pos += count
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def f64(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").astype(np.float64)

    @property
    def done(self) -> bool:
        return self.pos >= len(self.buf)


def encode_features(records: Sequence[FeatureRecord]) -> bytes:
    parts = []
    for rec in records:
        n, d = rec.node_features.shape
        parts += [
            FEATURE_MAGIC,
            _U32.pack(n),
            _U32.pack(d),
            np.ascontiguousarray(rec.node_features, dtype="<f8").tobytes(),
            np.ascontiguousarray(rec.edge_features, dtype="<f8").tobytes(),
        ]
    return b"".join(parts)


def decode_features(buf: bytes) -> list[FeatureRecord]:
    reader = _Reader(buf)
    records = []
    while not reader.done:
        start = reader.pos
        magic = reader.take(4, "record magic")
        if magic != FEATURE_MAGIC:
            if magic[:3] == FEATURE_MAGIC[:3]:
                raise VersionError(f"unsupported feature format {magic!r}")
            raise ParseError(f"bad feature record magic {magic!r}", f"byte {start}")
        n = reader.u32("node count")
        d = reader.u32("feature dim")
        nodes = reader.f64(n * d, "node features").reshape(n, d)
        edges = reader.f64(n * n * d, "edge features").reshape(n, n, d)
        records.append(FeatureRecord(nodes, edges))
    return records


def save_features(path, records: Sequence[FeatureRecord]) -> None:
    _atomic_write(path, encode_features(records))


def load_features(path) -> list[FeatureRecord]:
    return decode_features(Path(path).read_bytes())


def encode_checkpoint(tensors: dict[str, np.ndarray], meta: dict[str, Any]) -> bytes:
    header = {
        "meta": meta,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()],
    }
    head = json.dumps(header, allow_nan=False).encode("utf-8")
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in tensors.values())
    return CHECKPOINT_MAGIC + _U32.pack(FORMAT_VERSION) + _U32.pack(len(head)) + head + body


def decode_checkpoint(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    reader = _Reader(buf)
    if reader.take(4, "checkpoint magic") != CHECKPOINT_MAGIC:
        raise ParseError("not a checkpoint file", "byte 0")
    version = reader.u32("checkpoint version")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    size = reader.u32("header length")
    start = reader.pos
    try:
        header = json.loads(reader.take(size, "header").decode("utf-8"))
        specs = [(t["name"], tuple(int(x) for x in t["shape"])) for t in header["tensors"]]
    except (json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"checkpoint header is invalid: {exc!r}", f"byte {start}") from None
    tensors = {}
    for name, shape in specs:
        tensors[name] = reader.f64(int(np.prod(shape, dtype=np.int64)), f"tensor {name}").reshape(shape)
    if not reader.done:
        raise ParseError("trailing bytes after last tensor", f"byte {reader.pos}")
    return tensors, header.get("meta", {})


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict[str, Any]) -> None:
    _atomic_write(path, encode_checkpoint(tensors, meta))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return decode_checkpoint(Path(path).read_bytes())

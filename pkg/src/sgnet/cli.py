"""Command-line entry points.

Exit codes: 0 success, 2 usage error, 3 data or validation error,
4 numeric failure. ``--config FILE`` reads a JSON object whose keys are the
long option names (dashes or underscores); explicit flags win over it.
``SGR_SEED`` supplies the seed when no ``--seed`` is given.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data, pipeline
from .errors import ConfigError, DataError, NumericError, ParseError, SgnetError, VersionError
from .graph import INTERACTION_NAMES, NODE_CLASS_NAMES, validate

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

MANIFEST_NAME = "manifest.sgm"
FEATURES_NAME = "features.sgf"

log = logging.getLogger("sgnet")


class UsageError(Exception):
    pass


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("SGR_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"SGR_SEED must be an integer, got {env!r}") from None


def load_dataset(directory) -> tuple[data.DatasetManifest, list]:
    directory = Path(directory)
    manifest = data.load_manifest(directory / MANIFEST_NAME)
    raws = data.load_features(directory / FEATURES_NAME)
    if len(raws) != len(manifest.scenes):
        raise DataError(f"{len(manifest.scenes)} scenes but {len(raws)} feature records")
    for scene in manifest.scenes:
        problems = validate(scene)
        if problems:
            raise DataError(f"scene {scene.scene_id}: " + "; ".join(problems))
    return manifest, raws


def cmd_gen(args) -> int:
    cfg = data.GeneratorConfig(seed=_seed(args), num_scenes=args.scenes, interaction_noise=args.sigma)
    manifest, raws = data.generate_dataset(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data.save_manifest(out / MANIFEST_NAME, manifest)
    data.save_features(out / FEATURES_NAME, raws)
    node_counts = np.zeros(len(NODE_CLASS_NAMES), dtype=int)
    edge_counts = np.zeros(len(INTERACTION_NAMES), dtype=int)
    for scene in manifest.scenes:
        for node in scene.nodes:
            node_counts[node.class_id] += 1
        for edge in scene.edges:
            edge_counts[edge.label] += 1
    n_train = len(manifest.indices_in("train"))
    print(f"scenes: {len(manifest.scenes)} (train {n_train}, val {len(manifest.scenes) - n_train})")
    print("node classes: " + ", ".join(f"{n}={c}" for n, c in zip(NODE_CLASS_NAMES, node_counts)))
    print("interactions: " + ", ".join(f"{n}={c}" for n, c in zip(INTERACTION_NAMES, edge_counts)))
    return 0


def _train_config(args, **overrides) -> pipeline.TrainConfig:
    cfg = pipeline.TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        ls_epsilon=args.ls_epsilon,
        use_ls=not args.no_ls,
        use_attention=not args.no_attention,
        use_sageconv=not args.no_sageconv,
        seed=_seed(args),
    )
    return replace(cfg, **overrides)


def cmd_train(args) -> int:
    manifest, raws = load_dataset(args.data)
    cfg = _train_config(args)
    lines = []

    def record(entry):
        lines.append(
            f"epoch {entry.epoch} total {entry.total!r} hinge {entry.hinge!r} adjacency {entry.adjacency!r}"
        )
        print(lines[-1], flush=True)

    bundle, _ = pipeline.train(manifest, raws, cfg, on_epoch=record)
    out = Path(args.out_checkpoint)
    out.parent.mkdir(parents=True, exist_ok=True)
    bundle.save(out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log")
    log_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"checkpoint written to {out}")
    return 0


def cmd_eval(args) -> int:
    manifest, raws = load_dataset(args.data)
    bundle = pipeline.ModelBundle.load(args.checkpoint)
    report = pipeline.evaluate_bundle(bundle, manifest, raws, args.split)
    if args.report_out:
        data.save_report(args.report_out, report)
    print(report.render(Path(args.checkpoint).stem))
    return 0


def _seed_list(text: str) -> list[int]:
    try:
        if "," in text:
            return [int(s) for s in text.split(",") if s.strip()]
        return list(range(int(text)))
    except ValueError:
        raise UsageError(f"--seeds expects a count or a comma-separated list, got {text!r}") from None


def render_ablation(results: dict) -> str:
    mark = {True: "x", False: "-"}
    header = f"{'Base':^4} | {'LS':^4} | {'Attention':^9} | {'SageConv':^8} | {'mAP':^15} | {'Hinge':^15} | {'AUC':^15}"
    lines = [header, "-" * len(header)]
    for label, use_ls, use_att, use_sage in pipeline.ABLATION_ROWS:
        rows = results[label]
        cells = []
        for key in ("map", "hinge", "auc"):
            vals = np.array([r[key] for r in rows])
            sd = vals.std(ddof=1) if vals.size > 1 else 0.0
            cells.append(f"{vals.mean():.4f}±{sd:.4f}")
        lines.append(
            f"{mark[True]:^4} | {mark[use_ls]:^4} | {mark[use_att]:^9} | {mark[use_sage]:^8} | "
            + " | ".join(f"{c:^15}" for c in cells)
        )
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    manifest, raws = load_dataset(args.data)
    seeds = _seed_list(args.seeds)
    results = pipeline.run_ablation(manifest, raws, seeds, args.epochs, replace(pipeline.TrainConfig(), lr=args.lr))
    table = render_ablation(results)
    print(table)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(table + "\n", encoding="utf-8")
        out.with_suffix(".json").write_text(json.dumps(results, indent=1) + "\n", encoding="utf-8")
    return 0


def cmd_plotdata(args) -> int:
    manifest, raws = load_dataset(args.features)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["seed,compactness_ls,compactness_no_ls"]
    for seed in _seed_list(args.seeds):
        ls, plain = pipeline.compactness_pair(manifest, raws, seed, args.ls_epsilon)
        lines.append(f"{seed},{ls!r},{plain!r}")
    (out / "compactness.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if args.ablation:
        results = json.loads(Path(args.ablation).read_text(encoding="utf-8"))
        rows = ["config,seed,map"]
        for label, entries in results.items():
            rows.extend(f"{label},{e['seed']},{e['map']!r}" for e in entries)
        (out / "map_series.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"plot data written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgnet", description=__doc__.split("\n")[0])
    parser.add_argument("--config", help="JSON file of option defaults")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--scenes", type=int, default=500)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train extractors and the graph network")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--ls-epsilon", type=float, default=0.1)
    p.add_argument("--no-attention", action="store_true")
    p.add_argument("--no-sageconv", action="store_true")
    p.add_argument("--no-ls", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--log", help="training log path (default: checkpoint path with .log)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "all"), default="val")
    p.add_argument("--report-out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the four-row module ablation")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", default="5")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plotdata", help="emit cluster-compactness and mAP series")
    p.add_argument("--features", required=True, help="dataset directory")
    p.add_argument("--seeds", default="5")
    p.add_argument("--ls-epsilon", type=float, default=0.1)
    p.add_argument("--ablation", help="JSON written by 'ablate --out'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plotdata)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(overrides, dict):
        raise UsageError("config file must hold a JSON object")
    explicit = {a.split("=")[0].lstrip("-").replace("-", "_") for a in argv if a.startswith("--")}
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise UsageError(f"unknown config key {key!r} for command {args.command}")
        if attr not in explicit:
            setattr(args, attr, value)
    return args


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ParseError, VersionError, ConfigError, SgnetError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 stage failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

from . import __version__
from .config import PipelineConfig, load_config
from .descriptors import SearchStats
from .errors import ConfigError, FormatError, MsfmError, StageError
from .evaluate import align_models
from .features import FeatureStore, load_features, scale_coverage, select_top_scale
from .geometry import fundamental_from_poses
from .guided import guided_match_pair
from .io import (
    read_matchgraph,
    read_model,
    write_matchgraph,
    write_model,
    write_ply,
)
from .localize import localize_all
from .densify import densify_stage
from .matching import build_coarse_matchgraph
from .model import model_stats
from .pipeline import intrinsics_for_store, run_pipeline
from .reconstruct import ReconstructionConfig, incremental_reconstruct
from .synth import SceneSpec, generate_scene, write_scene


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file")
    for f in fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool" or isinstance(f.default, bool):
            parser.add_argument(flag, choices=["on", "off"], default=None)
        else:
            parser.add_argument(flag, type=str, default=None)


def _build_config(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    for f in fields(PipelineConfig):
        raw = getattr(args, f.name, None)
        if raw is None:
            continue
        if isinstance(f.default, bool):
            setattr(cfg, f.name, raw == "on")
        else:
            setattr(cfg, f.name, type(f.default)(raw))
    return cfg.validate()


def cmd_synth(args) -> int:
    spec = SceneSpec()
    if args.spec:
        text = Path(args.spec).read_text()
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{args.spec}:{lineno}: expected key=value")
            key, _, raw = line.partition("=")
            values[key.strip()] = raw.strip()
        names = {f.name: f for f in fields(SceneSpec)}
        for key, raw in values.items():
            if key not in names:
                raise ConfigError(f"{args.spec}: unknown scene key {key!r}")
            kind = type(names[key].default)
            setattr(spec, key, kind(raw))
    scene = generate_scene(spec)
    write_scene(scene, args.out)
    for w in scene.warnings:
        print(f"warning: {w}")
    print(f"wrote {len(scene.feature_sets)} feature files to {args.out}")
    return 0


def cmd_features_validate(args) -> int:
    fs = load_features(args.path)
    print(f"image_id={fs.image_id} width={fs.width} height={fs.height} "
          f"count={len(fs)} scale_max={fs.scale[0] if len(fs) else 0:.3f}")
    return 0


def cmd_features_stats(args) -> int:
    store = FeatureStore.load_dir(args.dir)
    for image_id in store.image_ids():
        fs = select_top_scale(store[image_id], args.eta)
        cov = scale_coverage(fs, args.eta) if len(fs) else 0.0
        print(f"image={image_id} features={len(fs)} tier={fs.coarse_count} "
              f"scale_coverage={cov:.3f}")
    return 0


def cmd_match(args) -> int:
    cfg = _build_config(args)
    if args.ratio is not None:
        cfg.ratio_unguided = float(args.ratio)
        cfg.validate()
    store = FeatureStore.load_dir(args.features, eta=cfg.eta)
    graph = build_coarse_matchgraph(
        store.sets, ratio=cfg.ratio_unguided, preemptive=cfg.preemptive,
        min_edge_inliers=cfg.min_inliers, seed=cfg.seed, threads=cfg.threads)
    write_matchgraph(graph, args.out)
    print(f"edges={len(graph.edges)} out={args.out}")
    return 0


def cmd_coarse(args) -> int:
    cfg = _build_config(args)
    store = FeatureStore.load_dir(args.features, eta=cfg.eta)
    graph = read_matchgraph(args.graph)
    intr = intrinsics_for_store(store, cfg.focal)
    try:
        model = incremental_reconstruct(
            graph, store, intr,
            ReconstructionConfig(pnp_min_inliers=cfg.min_inliers, seed=cfg.seed))
    except MsfmError as exc:
        raise StageError(str(exc)) from exc
    write_model(model, args.out)
    print(" ".join(model_stats(model, store).lines()))
    return 0


def cmd_localize(args) -> int:
    cfg = _build_config(args)
    store = FeatureStore.load_dir(args.features, eta=cfg.eta)
    model = read_model(args.model)
    graph = read_matchgraph(args.graph)
    intr = intrinsics_for_store(store, cfg.focal)
    newly, results = localize_all(
        model, store, graph, intr, set_cover_k=cfg.set_cover_k,
        set_cover_engage=cfg.set_cover_engage, force_set_cover=cfg.force_set_cover,
        ratio=cfg.ratio_unguided, min_correspondences=cfg.min_inliers,
        pnp_min_inliers=cfg.min_inliers, seed=cfg.seed, threads=cfg.threads)
    write_model(model, args.out)
    if args.report:
        lines = [
            f"image={r.image_id} method={r.method} inliers={r.inliers} "
            f"ok={int(r.pose is not None)} reason={r.reason or 'ok'}"
            for r in results
        ]
        Path(args.report).write_text("\n".join(lines) + "\n" if lines else "")
    print(f"localized={len(newly)} out={args.out}")
    return 0


def cmd_densify(args) -> int:
    cfg = _build_config(args)
    store = FeatureStore.load_dir(args.features, eta=cfg.eta)
    model = read_model(args.model)
    summary = densify_stage(
        model, store, iteration=args.iteration, d=cfg.d, ratio=cfg.ratio_guided,
        inflation=cfg.grid_inflation, threshold=cfg.covis_threshold,
        candidate_fraction=cfg.candidate_fraction, threads=cfg.threads)
    write_model(model, args.out)
    print(" ".join(f"{k}={v}" for k, v in sorted(summary.items())))
    return 0


def cmd_run(args) -> int:
    cfg = _build_config(args)
    result = run_pipeline(cfg, args.features, out_dir=args.out)
    sys.stdout.write(result.report_text())
    return 0


def cmd_eval(args) -> int:
    estimated = read_model(args.model)
    reference = read_model(args.reference)
    report = align_models(estimated, reference)
    print(" ".join(report.lines()))
    return 0


def cmd_export_ply(args) -> int:
    model = read_model(args.model)
    write_ply(model, args.out)
    print(f"points={len(model.points)} out={args.out}")
    return 0


def cmd_bench_guided(args) -> int:
    cfg = _build_config(args)
    store = FeatureStore.load_dir(args.features, eta=cfg.eta)
    model = read_model(args.model)
    pairs = []
    for line in Path(args.pairs).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        a, b = (int(v) for v in line.split())
        pairs.append((a, b))
    for a, b in pairs:
        geom = fundamental_from_poses(model.cameras[a], model.cameras[b])
        stats = SearchStats()
        t0 = time.time()
        matches = guided_match_pair(
            store[a], store[b], geom, d=cfg.d, ratio=cfg.ratio_guided,
            inflation=cfg.grid_inflation, strategy=args.strategy, stats=stats)
        dt = (time.time() - t0) * 1000.0
        print(f"pair={a},{b} strategy={args.strategy} time_ms={dt:.2f} "
              f"comparisons={stats.candidates} matches={len(matches)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msfm",
        description="coarse-to-fine multistage structure-from-motion toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--spec", help="scene spec file (key=value)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", help="inspect feature files")
    fsub = p.add_subparsers(dest="subcommand", required=True)
    pv = fsub.add_parser("validate")
    pv.add_argument("path")
    pv.set_defaults(func=cmd_features_validate)
    ps = fsub.add_parser("stats")
    ps.add_argument("dir")
    ps.add_argument("--eta", type=float, default=20.0)
    ps.set_defaults(func=cmd_features_stats)

    p = sub.add_parser("match", help="build the coarse match graph")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratio", type=float, default=None,
                   help="unguided ratio-test threshold (alias for --ratio-unguided)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("coarse", help="incremental reconstruction of the coarse graph")
    p.add_argument("--graph", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_coarse)

    p = sub.add_parser("localize", help="register remaining images to a model")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    _add_config_flags(p)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("densify", help="guided matching and triangulation")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--iteration", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_densify)

    p = sub.add_parser("run", help="full multistage pipeline")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="align two models and report camera errors")
    p.add_argument("--model", required=True)
    p.add_argument("--reference", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-ply", help="write a model's point cloud as PLY")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_ply)

    p = sub.add_parser("bench", help="benchmarks")
    bsub = p.add_subparsers(dest="subcommand", required=True)
    pg = bsub.add_parser("guided")
    pg.add_argument("--features", required=True)
    pg.add_argument("--pairs", required=True)
    pg.add_argument("--model", required=True, help="model file providing the poses")
    pg.add_argument("--strategy", choices=["linear", "radial", "grid"], default="grid")
    _add_config_flags(pg)
    pg.set_defaults(func=cmd_bench_guided)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except MsfmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

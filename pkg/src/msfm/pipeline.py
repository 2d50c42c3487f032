"""Stage sequencing: coarse reconstruction, then alternating camera and point
addition, with per-stage snapshots, stats and timing reports."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ba import bundle_adjust
from .config import PipelineConfig
from .densify import densify_stage
from .errors import StageError
from .features import FeatureStore
from .io import write_model, write_ply
from .localize import localize_all
from .matching import build_coarse_matchgraph
from .model import Model, StatsReport, make_intrinsics, model_stats
from .reconstruct import ReconstructionConfig, incremental_reconstruct

log = logging.getLogger(__name__)


def intrinsics_for_store(store: FeatureStore, focal: float = 0.0) -> dict[int, np.ndarray]:
    """Per-image K: given focal, or the 1.2 * max-dimension heuristic."""
    out = {}
    for image_id in store.image_ids():
        fs = store[image_id]
        f = focal if focal > 0 else 1.2 * max(fs.width, fs.height)
        out[image_id] = make_intrinsics(f, fs.width / 2.0, fs.height / 2.0)
    return out


@dataclass
class StageReport:
    name: str
    seconds: float
    stats: StatsReport
    added_cameras: int = 0
    added_points: int = 0
    extra: dict = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = [f"stage={self.name}", f"seconds={self.seconds:.3f}",
               f"added_cameras={self.added_cameras}", f"added_points={self.added_points}"]
        out += self.stats.lines()
        out += [f"{k}={v}" for k, v in sorted(self.extra.items())]
        return out


@dataclass
class PipelineResult:
    model: Model
    reports: list[StageReport]
    localization_log: list[str] = field(default_factory=list)

    def report_text(self) -> str:
        blocks = []
        for rep in self.reports:
            blocks.append(" ".join(rep.lines()))
        return "\n".join(blocks) + "\n"


def run_pipeline(config: PipelineConfig, feature_dir, *,
                 out_dir=None, store: FeatureStore | None = None) -> PipelineResult:
    """Full run: match, reconstruct coarse, then localize/densify per iteration."""
    config.validate()
    if store is None:
        store = FeatureStore.load_dir(feature_dir)
    store.apply_eta(config.eta)
    intrinsics = intrinsics_for_store(store, config.focal)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    reports: list[StageReport] = []
    loc_log: list[str] = []

    def snapshot(model: Model, name: str, t0: float, added_cam=0, added_pts=0, extra=None):
        rep = StageReport(name=name, seconds=time.time() - t0,
                          stats=model_stats(model, store),
                          added_cameras=added_cam, added_points=added_pts,
                          extra=extra or {})
        reports.append(rep)
        if out_dir is not None:
            write_model(model, out_dir / f"model_{name}.msfm")
        log.info("%s", " ".join(rep.lines()))

    t0 = time.time()
    graph = build_coarse_matchgraph(
        store.sets, ratio=config.ratio_unguided, preemptive=config.preemptive,
        min_edge_inliers=config.min_inliers, seed=config.seed, threads=config.threads)
    log.info("match graph: %d edges in %.1fs", len(graph.edges), time.time() - t0)
    if not graph.edges:
        raise StageError("match graph has no verified edges")

    t0 = time.time()
    try:
        model = incremental_reconstruct(
            graph, store, intrinsics,
            ReconstructionConfig(pnp_min_inliers=config.min_inliers, seed=config.seed))
    except Exception as exc:
        raise StageError(f"coarse reconstruction failed: {exc}") from exc
    snapshot(model, "coarse", t0,
             added_cam=len(model.cameras), added_pts=len(model.points))

    for iteration in range(1, config.iterations + 1):
        t0 = time.time()
        n_pts0 = len(model.points)
        newly, results = localize_all(
            model, store, graph, intrinsics, iteration=iteration,
            set_cover_k=config.set_cover_k, set_cover_engage=config.set_cover_engage,
            force_set_cover=config.force_set_cover, ratio=config.ratio_unguided,
            min_correspondences=config.min_inliers,
            pnp_min_inliers=config.min_inliers,
            seed=config.seed, threads=config.threads)
        for r in results:
            loc_log.append(
                f"iteration={iteration} image={r.image_id} method={r.method} "
                f"correspondences={len(r.correspondences)} inliers={r.inliers} "
                f"ok={int(r.pose is not None)} reason={r.reason or 'ok'}")
        snapshot(model, f"localize_{iteration}", t0, added_cam=len(newly),
                 extra={"attempted": len(results)})

        t0 = time.time()
        query = None if iteration == 1 else newly
        if iteration > 1 and not newly:
            summary = {"pairs": 0, "matches": 0, "new_points": 0, "extended_tracks": 0}
            model.stage_tag = f"after_densify({iteration})"
        else:
            summary = densify_stage(
                model, store, iteration=iteration, query_images=query,
                d=config.d, ratio=config.ratio_guided, inflation=config.grid_inflation,
                threshold=config.covis_threshold,
                candidate_fraction=config.candidate_fraction, threads=config.threads)
        snapshot(model, f"densify_{iteration}", t0,
                 added_pts=len(model.points) - n_pts0, extra=summary)

    if config.final_ba:
        t0 = time.time()
        bundle_adjust(model, store)
        snapshot(model, "final_ba", t0)

    if out_dir is not None:
        write_model(model, out_dir / "model_final.msfm")
        write_ply(model, out_dir / "points_final.ply")
        (out_dir / "stages.txt").write_text(
            PipelineResult(model, reports).report_text())
        (out_dir / "localization.txt").write_text("\n".join(loc_log) + "\n" if loc_log else "")
    return PipelineResult(model=model, reports=reports, localization_log=loc_log)

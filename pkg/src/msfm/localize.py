"""Camera addition: register every unregistered image against a model snapshot.

Each image is attempted independently (the stage parallelizes trivially):
first direct 3D-2D matching of point mean descriptors into the image's
feature index, then, if that fails the correspondence gate, ranked 2D-2D
matching through the image's best-connected localized neighbours.  Successful
poses are applied in one deterministic merge pass.
"""

from __future__ import annotations

import heapq
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .descriptors import DescriptorIndex, SearchStats
from .errors import InsufficientDataError
from .matching import MatchGraph, RATIO_UNGUIDED, SINGLE_CANDIDATE_CAP, ratio_filter
from .model import Camera, FeatureRef, Model, Point3D
from .reconstruct import pnp_ransac

log = logging.getLogger(__name__)

SET_COVER_K = 400
SET_COVER_ENGAGE_POINTS = 100_000
RANKED_TOP_K = 10
MIN_CORRESPONDENCES = 16


@dataclass
class SetCover:
    selected: list[int]
    k: int
    coverage: dict[int, int]  # image_id -> achieved coverage


@dataclass
class LocalizationResult:
    image_id: int
    method: str  # "direct3d2d" | "ranked2d2d" | "failed"
    correspondences: list[tuple[int, int]] = field(default_factory=list)  # (point_id, feature_id)
    pose: Camera | None = None
    inliers: int = 0
    inlier_refs: list[tuple[int, FeatureRef]] = field(default_factory=list)
    reason: str = ""


def mean_descriptor(point: Point3D, feature_store) -> np.ndarray:
    """Mean of the track's descriptors, cached on the point until it grows."""
    if point.mean_descriptor is None:
        descs = [
            feature_store.descriptor(image_id, feature_id).astype(np.float32)
            for image_id, feature_id in sorted(point.track.items())
        ]
        point.mean_descriptor = np.mean(descs, axis=0)
    return point.mean_descriptor


def compute_set_cover(model: Model, k: int = SET_COVER_K) -> SetCover:
    """Greedy point subset covering every camera k times (or to saturation).

    Picks the point covering the most not-yet-satisfied cameras; ties prefer
    longer tracks, then lower point ids.
    """
    if k < 1:
        raise ValueError(f"coverage target must be >= 1, got {k}")
    remaining = {image_id: k for image_id in model.cameras}
    pending = sorted(model.points)
    selected: list[int] = []
    coverage = {image_id: 0 for image_id in model.cameras}

    # lazy greedy: scores only decrease, so a stale top entry is re-scored
    def score(pid: int) -> int:
        return sum(1 for image_id in model.points[pid].track if remaining.get(image_id, 0) > 0)

    heap = [(-score(pid), -len(model.points[pid].track), pid) for pid in pending]
    heapq.heapify(heap)
    while heap:
        neg_s, neg_len, pid = heapq.heappop(heap)
        s = score(pid)
        if s == 0:
            continue
        if -neg_s != s:
            heapq.heappush(heap, (-s, neg_len, pid))
            continue
        selected.append(pid)
        for image_id in model.points[pid].track:
            if remaining.get(image_id, 0) > 0:
                remaining[image_id] -= 1
            coverage[image_id] = coverage.get(image_id, 0) + 1
        if all(v == 0 for v in remaining.values()):
            break
    return SetCover(selected=selected, k=k, coverage=coverage)


def direct_3d2d_search(model: Model, point_ids, image_fs, feature_store, *,
                       ratio: float = RATIO_UNGUIDED,
                       single_cap: float = SINGLE_CANDIDATE_CAP,
                       index: DescriptorIndex | None = None,
                       stats: SearchStats | None = None) -> list[tuple[int, int]]:
    """Match covered points' mean descriptors into an image's feature index.

    Returns (point_id, feature_id) pairs; a feature backs at most one point.
    """
    point_ids = sorted(point_ids)
    if not point_ids or len(image_fs) == 0:
        return []
    queries = np.stack([mean_descriptor(model.points[pid], feature_store)
                        for pid in point_ids])
    if index is None:
        index = DescriptorIndex(image_fs.descriptors_f32())
    dist, idx = index.knn2(queries, stats)
    accepted = ratio_filter(dist, idx, ratio, single_cap)
    by_feature: dict[int, tuple[float, int]] = {}
    for row, feat, d, _ in accepted:
        cur = by_feature.get(feat)
        if cur is None or d < cur[0]:
            by_feature[feat] = (d, point_ids[row])
    return sorted((pid, feat) for feat, (d, pid) in by_feature.items())


def ranked_2d2d_search(model: Model, graph: MatchGraph, image_id: int, image_fs,
                       feature_store, *,
                       top_k: int = RANKED_TOP_K,
                       ratio: float = RATIO_UNGUIDED,
                       single_cap: float = SINGLE_CANDIDATE_CAP,
                       min_correspondences: int = MIN_CORRESPONDENCES,
                       index: DescriptorIndex | None = None,
                       stats: SearchStats | None = None) -> list[tuple[int, int]]:
    """3D-2D correspondences via track features of well-matched neighbours.

    The localized neighbours are ranked by shared coarse matches; each
    neighbour's tracked 2D features act as proxies for their points.
    Returns [] unless more than ``min_correspondences`` pairs were found.
    Raises InsufficientDataError when no localized neighbour exists.
    """
    neighbors = [
        (graph.match_count(image_id, other), -other, other)
        for other in graph.neighbors(image_id)
        if model.is_registered(other)
    ]
    if not neighbors:
        raise InsufficientDataError(f"image {image_id} has no localized neighbours")
    neighbors.sort(reverse=True)
    if index is None:
        index = DescriptorIndex(image_fs.descriptors_f32())
    best: dict[int, tuple[float, int]] = {}  # point -> (distance, feature_id)
    for _, _, other in neighbors[:top_k]:
        proxy = [
            (pid, model.points[pid].track[other])
            for pid in sorted(model.points_visible_in(other))
        ]
        if not proxy:
            continue
        queries = np.stack([
            feature_store.descriptor(other, feat).astype(np.float32)
            for _, feat in proxy
        ])
        dist, idx = index.knn2(queries, stats)
        for row, feat, d, _ in ratio_filter(dist, idx, ratio, single_cap):
            pid = proxy[row][0]
            cur = best.get(pid)
            if cur is None or d < cur[0]:
                best[pid] = (d, feat)
    by_feature: dict[int, tuple[float, int]] = {}
    for pid, (d, feat) in best.items():
        cur = by_feature.get(feat)
        if cur is None or d < cur[0]:
            by_feature[feat] = (d, pid)
    corr = sorted((pid, feat) for feat, (d, pid) in by_feature.items())
    if len(corr) <= min_correspondences:
        return []
    return corr


def localize_image(model: Model, graph: MatchGraph, image_id: int, feature_store,
                   intrinsics: np.ndarray, *,
                   cover_points=None,
                   ratio: float = RATIO_UNGUIDED,
                   min_correspondences: int = MIN_CORRESPONDENCES,
                   pnp_threshold: float = 4.0,
                   pnp_min_inliers: int = 16,
                   seed: int = 0,
                   stats: SearchStats | None = None) -> LocalizationResult:
    """Pure function of (snapshot, image): direct search, then ranked fallback."""
    image_fs = feature_store.sets[image_id]
    index = DescriptorIndex(image_fs.descriptors_f32())
    points = cover_points if cover_points is not None else sorted(model.points)
    corr = direct_3d2d_search(model, points, image_fs, feature_store,
                              ratio=ratio, index=index, stats=stats)
    method = "direct3d2d"
    if len(corr) <= min_correspondences:
        try:
            corr = ranked_2d2d_search(model, graph, image_id, image_fs, feature_store,
                                      ratio=ratio, index=index,
                                      min_correspondences=min_correspondences,
                                      stats=stats)
        except InsufficientDataError:
            corr = []
        method = "ranked2d2d"
        if len(corr) <= min_correspondences:
            return LocalizationResult(image_id=image_id, method=method,
                                      reason="below correspondence gate")
    X = np.stack([model.points[pid].position for pid, _ in corr])
    uv = np.stack([image_fs.xy[feat] for _, feat in corr]).astype(np.float64)
    try:
        result = pnp_ransac(X, uv, intrinsics, threshold=pnp_threshold,
                            min_inliers=pnp_min_inliers, seed=seed + image_id)
    except InsufficientDataError:
        result = None
    if result is None:
        return LocalizationResult(image_id=image_id, method=method,
                                  correspondences=corr, reason="resection failed")
    R, t, mask = result
    pose = Camera(K=intrinsics, R=R, t=t, image_id=image_id)
    inlier_refs = [(corr[i][0], FeatureRef(image_id, corr[i][1]))
                   for i in range(len(corr)) if mask[i]]
    return LocalizationResult(image_id=image_id, method=method, correspondences=corr,
                              pose=pose, inliers=int(mask.sum()), inlier_refs=inlier_refs)


def localize_all(model: Model, feature_store, graph: MatchGraph,
                 intrinsics: dict[int, np.ndarray], *,
                 iteration: int = 1,
                 set_cover_k: int = SET_COVER_K,
                 set_cover_engage: int = SET_COVER_ENGAGE_POINTS,
                 force_set_cover: bool = False,
                 ratio: float = RATIO_UNGUIDED,
                 min_correspondences: int = MIN_CORRESPONDENCES,
                 pnp_threshold: float = 4.0,
                 pnp_min_inliers: int = 16,
                 seed: int = 0,
                 threads: int = 1,
                 order=None) -> tuple[list[int], list[LocalizationResult]]:
    """Attempt every unregistered image against the current snapshot.

    All attempts read the same snapshot; successful poses are attached in a
    single image-id-ordered merge, so the outcome does not depend on the
    processing order or thread count.  Returns (newly registered ids,
    per-image results).
    """
    unregistered = [i for i in sorted(feature_store.sets) if not model.is_registered(i)]
    if order is not None:
        wanted = set(unregistered)
        unregistered = [i for i in order if i in wanted]
    if not unregistered:
        model.stage_tag = f"after_localize({iteration})"
        return [], []
    cover_points = None
    if force_set_cover or len(model.points) > set_cover_engage:
        cover_points = compute_set_cover(model, set_cover_k).selected

    def attempt(image_id: int) -> LocalizationResult:
        return localize_image(model, graph, image_id, feature_store,
                              intrinsics[image_id], cover_points=cover_points,
                              ratio=ratio, min_correspondences=min_correspondences,
                              pnp_threshold=pnp_threshold,
                              pnp_min_inliers=pnp_min_inliers, seed=seed)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(attempt, unregistered))
    else:
        results = [attempt(i) for i in unregistered]

    newly = []
    for result in sorted(results, key=lambda r: r.image_id):
        if result.pose is None:
            log.info("image %d not localized (%s: %s)",
                     result.image_id, result.method, result.reason)
            continue
        conflicts = model.attach_camera(result.pose, result.inlier_refs)
        if conflicts:
            log.info("image %d attached with %d dropped conflicts",
                     result.image_id, conflicts)
        newly.append(result.image_id)
    model.stage_tag = f"after_localize({iteration})"
    return newly, results

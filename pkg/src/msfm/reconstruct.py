"""Incremental reconstruction over the coarse match graph.

Seeded from the strongest well-conditioned edge, then grown image by image:
the unregistered image with the most 2D matches into already-triangulated
tracks is registered by robust resection, its fresh correspondences are
triangulated, and bundle adjustment runs every few registrations plus once
at the end.  This is the only stage that bundle-adjusts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .ba import bundle_adjust, rodrigues
from .errors import InsufficientDataError, NoSeedError
from .geometry import relative_pose_from_fundamental, triangulate_track
from .matching import MatchGraph
from .model import Camera, FeatureRef, Model

log = logging.getLogger(__name__)

PNP_THRESHOLD_PX = 4.0
PNP_MIN_INLIERS = 16
PNP_MIN_CORRESPONDENCES = 6
PNP_MAX_ITERS = 2048
PNP_CONFIDENCE = 0.999

SEED_MIN_MEDIAN_ANGLE_DEG = 2.0
MIN_REGISTER_CORRESPONDENCES = 16
BA_BATCH = 8
BA_ITERS_EARLY = 50
BA_ITERS_FINAL = 100


@dataclass
class ReconstructionConfig:
    seed_min_median_angle_deg: float = SEED_MIN_MEDIAN_ANGLE_DEG
    pnp_threshold_px: float = PNP_THRESHOLD_PX
    pnp_min_inliers: int = PNP_MIN_INLIERS
    min_correspondences: int = MIN_REGISTER_CORRESPONDENCES
    ba_batch: int = BA_BATCH
    ba_iters_early: int = BA_ITERS_EARLY
    ba_iters_final: int = BA_ITERS_FINAL
    ba_rel_tol: float = 1e-6
    tri_max_error_px: float = 4.0
    tri_min_angle_deg: float = 1.0
    seed: int = 0


def dlt_pose(points3d: np.ndarray, pixels: np.ndarray, K: np.ndarray):
    """Projection-matrix DLT resection; returns (R, t) for x ~ K(RX + t).

    Needs >= 6 points in general position; the projective sign is fixed by
    cheirality on the input points.
    """
    X = np.asarray(points3d, dtype=np.float64)
    uv = np.asarray(pixels, dtype=np.float64)
    n = len(X)
    if n < 6:
        raise InsufficientDataError(f"resection needs >= 6 points, got {n}")
    # normalize for conditioning
    cx = X.mean(axis=0)
    sx = np.sqrt(3.0) / max(np.linalg.norm(X - cx, axis=1).mean(), 1e-12)
    cu = uv.mean(axis=0)
    su = np.sqrt(2.0) / max(np.linalg.norm(uv - cu, axis=1).mean(), 1e-12)
    Xn = (X - cx) * sx
    un = (uv - cu) * su
    A = np.zeros((2 * n, 12))
    Xh = np.hstack([Xn, np.ones((n, 1))])
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -un[:, 0:1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -un[:, 1:2] * Xh
    _, _, Vt = np.linalg.svd(A)
    Pn = Vt[-1].reshape(3, 4)
    # undo normalization
    Tu = np.array([[su, 0, -su * cu[0]], [0, su, -su * cu[1]], [0, 0, 1.0]])
    Tx = np.eye(4)
    Tx[:3, :3] *= sx
    Tx[:3, 3] = -sx * cx
    P = np.linalg.inv(Tu) @ Pn @ Tx
    G = np.linalg.inv(K) @ P
    best = None
    for sign in (1.0, -1.0):
        M = sign * G[:, :3]
        U, S, Vt2 = np.linalg.svd(M)
        R = U @ Vt2
        if np.linalg.det(R) < 0:
            continue
        scale = S.mean()
        if scale < 1e-12:
            continue
        t = sign * G[:, 3] / scale
        depths = (X @ R.T + t)[:, 2]
        front = int((depths > 0).sum())
        if best is None or front > best[0]:
            best = (front, R, t)
    if best is None or best[0] == 0:
        raise InsufficientDataError("resection produced no valid orientation")
    return best[1], best[2]


def refine_pose_lm(R, t, K, points3d, pixels, iters: int = 20):
    """Levenberg-Marquardt on (rotation, translation) with K fixed."""
    X = np.asarray(points3d, dtype=np.float64)
    uv = np.asarray(pixels, dtype=np.float64)
    f = K[0, 0]
    pp = K[:2, 2]

    def residuals(Rc, tc):
        xc = X @ Rc.T + tc
        return f * xc[:, :2] / xc[:, 2:3] + pp - uv, xc

    res, xc = residuals(R, t)
    cost = float((res ** 2).sum())
    lam = 1e-6
    for _ in range(iters):
        x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
        d_uv = np.zeros((len(X), 2, 3))
        d_uv[:, 0, 0] = f / z
        d_uv[:, 0, 2] = -f * x / z ** 2
        d_uv[:, 1, 1] = f / z
        d_uv[:, 1, 2] = -f * y / z ** 2
        RX = xc - t
        d_rot = np.zeros((len(X), 3, 3))
        d_rot[:, 0, 1] = RX[:, 2]
        d_rot[:, 0, 2] = -RX[:, 1]
        d_rot[:, 1, 0] = -RX[:, 2]
        d_rot[:, 1, 2] = RX[:, 0]
        d_rot[:, 2, 0] = RX[:, 1]
        d_rot[:, 2, 1] = -RX[:, 0]
        J = np.zeros((len(X), 2, 6))
        J[:, :, 0:3] = d_uv @ d_rot
        J[:, :, 3:6] = d_uv
        Jf = J.reshape(-1, 6)
        rf = res.reshape(-1)
        H = Jf.T @ Jf
        g = Jf.T @ rf
        stepped = False
        for _ in range(8):
            Hd = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                delta = np.linalg.solve(Hd, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            R_new = rodrigues(delta[0:3]) @ R
            t_new = t + delta[3:6]
            res_new, xc_new = residuals(R_new, t_new)
            cost_new = float((res_new ** 2).sum())
            if np.isfinite(cost_new) and cost_new < cost:
                rel = (cost - cost_new) / max(cost, 1e-30)
                R, t, res, xc, cost = R_new, t_new, res_new, xc_new, cost_new
                lam = max(lam / 10.0, 1e-15)
                stepped = True
                if rel < 1e-10:
                    return R, t
                break
            lam *= 10.0
        if not stepped:
            break
    return R, t


def pnp_ransac(points3d, pixels, K, *,
               threshold: float = PNP_THRESHOLD_PX,
               min_inliers: int = PNP_MIN_INLIERS,
               max_iters: int = PNP_MAX_ITERS,
               confidence: float = PNP_CONFIDENCE,
               seed: int = 0):
    """Robust resection from 3D-2D correspondences.

    Returns (R, t, inlier_mask) or None when the best hypothesis has fewer
    than ``min_inliers`` supporters.  Raises InsufficientDataError below 6
    correspondences.
    """
    X = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    n = len(X)
    if n < PNP_MIN_CORRESPONDENCES:
        raise InsufficientDataError(f"resection needs >= 6 correspondences, got {n}")
    rng = np.random.default_rng(seed)
    f = K[0, 0]
    pp = K[:2, 2]
    best_mask = None
    best_count = 0
    needed = max_iters
    it = 0
    while it < needed and it < max_iters:
        it += 1
        sample = rng.choice(n, size=6, replace=False)
        try:
            R, t = dlt_pose(X[sample], uv[sample], K)
        except (InsufficientDataError, np.linalg.LinAlgError):
            continue
        xc = X @ R.T + t
        with np.errstate(divide="ignore", invalid="ignore"):
            proj = f * xc[:, :2] / xc[:, 2:3] + pp
            err = np.linalg.norm(proj - uv, axis=1)
        mask = (xc[:, 2] > 0) & np.isfinite(err) & (err < threshold)
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            w = count / n
            if w > 0:
                denom = np.log(max(1.0 - w ** 6, 1e-15))
                needed = min(max_iters, int(np.ceil(np.log(1.0 - confidence) / denom)))
    if best_mask is None or best_count < max(min_inliers, PNP_MIN_CORRESPONDENCES):
        return None
    try:
        R, t = dlt_pose(X[best_mask], uv[best_mask], K)
    except (InsufficientDataError, np.linalg.LinAlgError):
        return None
    R, t = refine_pose_lm(R, t, K, X[best_mask], uv[best_mask])
    xc = X @ R.T + t
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = f * xc[:, :2] / xc[:, 2:3] + pp
        err = np.linalg.norm(proj - uv, axis=1)
    mask = (xc[:, 2] > 0) & np.isfinite(err) & (err < threshold)
    if int(mask.sum()) < min_inliers:
        return None
    return R, t, mask


def _edge_points(graph: MatchGraph, feature_sets, a: int, b: int):
    edge = graph.edges[(a, b)]
    matches = edge.inlier_matches()
    pts_q = np.array([feature_sets[a].xy[m.query.feature_id] for m in matches], dtype=np.float64)
    pts_c = np.array([feature_sets[b].xy[m.target.feature_id] for m in matches], dtype=np.float64)
    return matches, pts_q, pts_c


def _edge_median_angle(edge, feature_sets, intrinsics, a, b, pts_q, pts_c,
                       sample_cap: int = 64):
    """Median triangulation angle (degrees) of an edge, or None if unusable."""
    from .geometry import _triangulate_two_view_normalized

    n = len(pts_q)
    step = max(1, n // sample_cap)
    pq = pts_q[::step]
    pc = pts_c[::step]
    try:
        R, t, _ = relative_pose_from_fundamental(
            edge.geometry, intrinsics[a], intrinsics[b], pq, pc)
    except Exception:
        return None
    k = len(pq)
    xq = (np.linalg.inv(intrinsics[a]) @ np.hstack([pq, np.ones((k, 1))]).T).T[:, :2]
    xc = (np.linalg.inv(intrinsics[b]) @ np.hstack([pc, np.ones((k, 1))]).T).T[:, :2]
    X = _triangulate_two_view_normalized(R, t, xq, xc)
    center_b = -R.T @ t
    rays_a = X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-15)
    rays_b = X - center_b
    rays_b /= np.maximum(np.linalg.norm(rays_b, axis=1, keepdims=True), 1e-15)
    cosang = np.clip(np.einsum("ij,ij->i", rays_a, rays_b), -1.0, 1.0)
    return float(np.degrees(np.median(np.arccos(cosang))))


def select_seed_pair(graph: MatchGraph, feature_sets, intrinsics) -> tuple[int, int]:
    """Edge with the most inliers among those with adequate parallax.

    Edges are tried in descending inlier count (ties lexicographic), so the
    usual case evaluates the parallax gate on one edge only.  Raises
    NoSeedError when nothing qualifies.
    """
    order = sorted(
        (key for key in graph.edges if graph.edges[key].geometry is not None),
        key=lambda key: (-len(graph.edges[key].inlier_matches()), key))
    for (a, b) in order:
        edge = graph.edges[(a, b)]
        matches, pts_q, pts_c = _edge_points(graph, feature_sets, a, b)
        if len(matches) < 8:
            continue
        median_angle = _edge_median_angle(edge, feature_sets, intrinsics,
                                          a, b, pts_q, pts_c)
        if median_angle is not None and median_angle >= SEED_MIN_MEDIAN_ANGLE_DEG:
            return a, b
    raise NoSeedError("no geometry-verified edge has enough parallax to seed")


def _correspondences_to_model(model: Model, graph: MatchGraph, feature_sets, image_id: int):
    """(point_id, feature_id) pairs linking an unregistered image to tracks."""
    best: dict[int, tuple[float, int]] = {}  # point -> (distance, feature in image)
    for other in graph.neighbors(image_id):
        if not model.is_registered(other):
            continue
        a, b = (image_id, other) if image_id < other else (other, image_id)
        edge = graph.edges[(a, b)]
        for m in edge.inlier_matches():
            if a == image_id:
                own_feat, their_ref = m.query.feature_id, m.target
            else:
                own_feat, their_ref = m.target.feature_id, m.query
            pid = model.owner(their_ref)
            if pid is None:
                continue
            cur = best.get(pid)
            if cur is None or m.distance < cur[0]:
                best[pid] = (m.distance, own_feat)
    # a feature may support only one point
    by_feature: dict[int, tuple[float, int]] = {}
    for pid, (dist, feat) in best.items():
        cur = by_feature.get(feat)
        if cur is None or dist < cur[0]:
            by_feature[feat] = (dist, pid)
    return sorted((pid, feat) for feat, (dist, pid) in by_feature.items())


def _triangulate_new_tracks(model: Model, graph: MatchGraph, feature_sets,
                            image_id: int, config: ReconstructionConfig) -> int:
    """Grow tracks between a fresh camera and its registered neighbours.

    A match whose other feature already belongs to a track extends that track
    (reprojection gated); a match between two untracked features triangulates
    a new two-view point.  Extending first keeps one physical point from
    spawning parallel tracks across edges.
    """
    added = 0

    def maybe_extend(pid: int, ref: FeatureRef) -> None:
        cam = model.cameras[ref.image_id]
        pix = feature_sets[ref.image_id].xy[ref.feature_id].astype(np.float64)
        proj, depth = cam.project(model.points[pid].position)
        if depth[0] <= 0 or np.linalg.norm(proj[0] - pix) > config.tri_max_error_px:
            return
        model.extend_track(pid, ref)

    pending = []
    for other in graph.neighbors(image_id):
        if not model.is_registered(other) or other == image_id:
            continue
        a, b = (image_id, other) if image_id < other else (other, image_id)
        edge = graph.edges[(a, b)]
        for m in edge.inlier_matches():
            own_q = model.owner(m.query)
            own_t = model.owner(m.target)
            if own_q is not None and own_t is None:
                maybe_extend(own_q, m.target)
            elif own_t is not None and own_q is None:
                maybe_extend(own_t, m.query)
            elif own_q is None and own_t is None:
                pending.append((a, b, m))
    for a, b, m in pending:
        if model.owner(m.query) is not None or model.owner(m.target) is not None:
            continue
        obs = [
            (model.cameras[a], feature_sets[a].xy[m.query.feature_id].astype(np.float64)),
            (model.cameras[b], feature_sets[b].xy[m.target.feature_id].astype(np.float64)),
        ]
        tri = triangulate_track(obs, max_error=config.tri_max_error_px,
                                min_angle_deg=config.tri_min_angle_deg)
        if tri is None:
            continue
        model.add_point(tri.point, [m.query, m.target])
        added += 1
    return added


def incremental_reconstruct(graph: MatchGraph, feature_store, intrinsics: dict[int, np.ndarray],
                            config: ReconstructionConfig | None = None) -> Model:
    """Grow a model from the match graph until no image clears the gate."""
    config = config or ReconstructionConfig()
    feature_sets = feature_store.sets
    if not graph.edges:
        raise NoSeedError("empty match graph")
    a, b = select_seed_pair(graph, feature_sets, intrinsics)
    edge = graph.edges[(a, b)]
    matches, pts_q, pts_c = _edge_points(graph, feature_sets, a, b)
    R, t, _ = relative_pose_from_fundamental(
        edge.geometry, intrinsics[a], intrinsics[b], pts_q, pts_c)
    model = Model(stage_tag="coarse")
    cam_a = Camera(K=intrinsics[a], R=np.eye(3), t=np.zeros(3), image_id=a)
    cam_b = Camera(K=intrinsics[b], R=R, t=t, image_id=b)
    model.attach_camera(cam_a)
    model.attach_camera(cam_b)
    for i, m in enumerate(matches):
        if model.owner(m.query) is not None or model.owner(m.target) is not None:
            continue
        tri = triangulate_track(
            [(cam_a, pts_q[i]), (cam_b, pts_c[i])],
            max_error=config.tri_max_error_px, min_angle_deg=config.tri_min_angle_deg)
        if tri is not None:
            model.add_point(tri.point, [m.query, m.target])
    log.info("seed pair (%d, %d): %d points", a, b, len(model.points))
    bundle_adjust(model, feature_store, max_iters=config.ba_iters_early,
                  rel_tol=config.ba_rel_tol)

    since_ba = 0
    while True:
        candidates = []
        for image_id in sorted(feature_sets):
            if model.is_registered(image_id):
                continue
            corr = _correspondences_to_model(model, graph, feature_sets, image_id)
            if len(corr) >= config.min_correspondences:
                candidates.append((len(corr), -image_id, image_id, corr))
        if not candidates:
            break
        candidates.sort(reverse=True)
        result = None
        image_id = corr = None
        for _, _, img, corr_img in candidates:
            X = np.stack([model.points[pid].position for pid, _ in corr_img])
            uv = np.stack([feature_sets[img].xy[feat]
                           for _, feat in corr_img]).astype(np.float64)
            result = pnp_ransac(X, uv, intrinsics[img],
                                threshold=config.pnp_threshold_px,
                                min_inliers=config.pnp_min_inliers,
                                seed=config.seed + img)
            if result is not None:
                image_id, corr = img, corr_img
                break
            log.info("image %d failed resection this round", img)
        if result is None:
            # remaining images are left for the localization stage
            break
        R, t, mask = result
        cam = Camera(K=intrinsics[image_id], R=R, t=t, image_id=image_id)
        inliers = [(corr[i][0], FeatureRef(image_id, corr[i][1]))
                   for i in range(len(corr)) if mask[i]]
        model.attach_camera(cam, inliers)
        _triangulate_new_tracks(model, graph, feature_store.sets, image_id, config)
        since_ba += 1
        log.info("registered image %d (%d inliers), model: %d cams %d pts",
                 image_id, int(mask.sum()), len(model.cameras), len(model.points))
        if since_ba >= config.ba_batch:
            bundle_adjust(model, feature_store, max_iters=config.ba_iters_early,
                          rel_tol=config.ba_rel_tol)
            since_ba = 0
    bundle_adjust(model, feature_store, max_iters=config.ba_iters_final,
                  rel_tol=config.ba_rel_tol)
    model.stage_tag = "coarse"
    return model

import numpy as np
import pytest

from msfm.errors import InsufficientDataError, NoSeedError
from msfm.evaluate import align_models
from msfm.matching import MatchGraph, build_coarse_matchgraph
from msfm.model import make_intrinsics
from msfm.reconstruct import (
    ReconstructionConfig,
    dlt_pose,
    incremental_reconstruct,
    pnp_ransac,
    select_seed_pair,
)
from msfm.synth import SceneSpec, generate_scene


def rotation_error_deg(R_est, R_true):
    c = np.clip((np.trace(R_est @ R_true.T) - 1.0) / 2.0, -1.0, 1.0)
    return np.degrees(np.arccos(c))


class TestDltPose:
    def test_exact_six_points(self, tiny_scene):
        cam = tiny_scene.cameras[2]
        vis = sorted(tiny_scene.visible_points(2))[:6]
        X = tiny_scene.points[vis]
        uv, _ = cam.project(X)
        R, t = dlt_pose(X, uv, cam.K)
        assert rotation_error_deg(R, cam.R) < 1e-6
        assert np.linalg.norm(t - cam.t) < 1e-6

    def test_too_few_points(self):
        with pytest.raises(InsufficientDataError):
            dlt_pose(np.zeros((5, 3)), np.zeros((5, 2)), np.eye(3))


class TestPnpRansac:
    def test_noise_free_exact(self, tiny_scene):
        cam = tiny_scene.cameras[1]
        vis = sorted(tiny_scene.visible_points(1))[:100]
        X = tiny_scene.points[vis]
        uv, _ = cam.project(X)
        R, t, mask = pnp_ransac(X, uv, cam.K, seed=0)
        assert mask.all()
        assert rotation_error_deg(R, cam.R) < 1e-6

    def test_forty_percent_outliers(self, tiny_scene):
        rng = np.random.default_rng(1)
        cam = tiny_scene.cameras[3]
        vis = sorted(tiny_scene.visible_points(3))[:100]
        X = tiny_scene.points[vis]
        uv, _ = cam.project(X)
        uv = uv + rng.normal(0, 0.3, uv.shape)
        bad = rng.choice(100, size=40, replace=False)
        truth = np.ones(100, dtype=bool)
        truth[bad] = False
        uv[bad] = rng.uniform(0, [1024, 768], size=(40, 2))
        R, t, mask = pnp_ransac(X, uv, cam.K, seed=2)
        assert rotation_error_deg(R, cam.R) < 0.1
        recall = (mask & truth).sum() / truth.sum()
        assert recall >= 0.95

    def test_collinear_points_fail(self):
        rng = np.random.default_rng(3)
        K = make_intrinsics(900.0, 512.0, 384.0)
        s = rng.uniform(2, 10, size=30)
        X = np.outer(s, np.array([0.1, 0.2, 1.0]))  # a 3D line
        uv = (X @ K.T)
        uv = uv[:, :2] / uv[:, 2:]
        assert pnp_ransac(X, uv, K, seed=4) is None

    def test_below_minimum(self):
        with pytest.raises(InsufficientDataError):
            pnp_ransac(np.zeros((5, 3)), np.zeros((5, 2)), np.eye(3))

    def test_inlier_gate(self, tiny_scene):
        rng = np.random.default_rng(5)
        cam = tiny_scene.cameras[0]
        vis = sorted(tiny_scene.visible_points(0))[:30]
        X = tiny_scene.points[vis]
        uv = rng.uniform(0, [1024, 768], size=(30, 2))  # pure noise
        assert pnp_ransac(X, uv, cam.K, seed=6) is None


class TestSelectSeedPair:
    def _graph_and_k(self, scene):
        store = scene.store()
        graph = build_coarse_matchgraph(store.sets)
        K = {i: scene.cameras[i].K for i in store.sets}
        return store, graph, K

    def test_single_edge(self, tiny_scene):
        store, graph, K = self._graph_and_k(tiny_scene)
        key = sorted(graph.edges)[0]
        single = MatchGraph(edges={key: graph.edges[key]})
        assert select_seed_pair(single, store.sets, K) == key

    def test_angle_gate_beats_inlier_count(self, tiny_scene):
        store, graph, K = self._graph_and_k(tiny_scene)
        # ring cameras all have parallax; synthesize the contract instead:
        # restrict to two edges and check the more-inlier edge wins when both
        # qualify
        keys = sorted(graph.edges,
                      key=lambda k: -len(graph.edges[k].inlier_matches()))[:2]
        sub = MatchGraph(edges={k: graph.edges[k] for k in keys})
        chosen = select_seed_pair(sub, store.sets, K)
        counts = {k: len(sub.edges[k].inlier_matches()) for k in keys}
        assert counts[chosen] == max(counts.values())

    def test_no_parallax_no_seed(self):
        # two cameras sharing a centre cannot seed (estimated F is degenerate
        # and the pose step fails)
        scene = generate_scene(SceneSpec(n_cameras=2, n_points=150, seed=9))
        store = scene.store()
        graph = build_coarse_matchgraph(store.sets)
        K = {i: scene.cameras[i].K for i in store.sets}
        if not graph.edges:
            pytest.skip("no verified edge to test with")
        # rebuild the scene with coincident cameras by reusing image 0 twice
        sets = {0: store.sets[0], 1: store.sets[0]}
        import dataclasses
        sets[1] = dataclasses.replace(sets[1], image_id=1)
        g2 = build_coarse_matchgraph(sets)
        with pytest.raises(NoSeedError):
            select_seed_pair(g2, sets, {0: K[0], 1: K[0]})

    def test_seed_triangulates_cleanly(self, tiny_scene):
        store, graph, K = self._graph_and_k(tiny_scene)
        a, b = select_seed_pair(graph, store.sets, K)
        from msfm.geometry import relative_pose_from_fundamental, triangulate_track
        from msfm.model import Camera
        edge = graph.edges[(a, b)]
        matches = edge.inlier_matches()
        pts_q = np.stack([store.sets[a].xy[m.query.feature_id] for m in matches])
        pts_c = np.stack([store.sets[b].xy[m.target.feature_id] for m in matches])
        R, t, _ = relative_pose_from_fundamental(edge.geometry, K[a], K[b],
                                                 pts_q, pts_c)
        cam_a = Camera(K=K[a], R=np.eye(3), t=np.zeros(3), image_id=a)
        cam_b = Camera(K=K[b], R=R, t=t, image_id=b)
        ok = sum(
            1 for i in range(len(matches))
            if triangulate_track([(cam_a, pts_q[i]), (cam_b, pts_c[i])]) is not None
        )
        assert ok / len(matches) >= 0.9


class TestIncrementalReconstruct:
    def test_two_image_graph(self, tiny_scene):
        store = tiny_scene.store()
        graph = build_coarse_matchgraph(store.sets)
        key = max(sorted(graph.edges),
                  key=lambda k: len(graph.edges[k].inlier_matches()))
        sub = MatchGraph(edges={key: graph.edges[key]})
        K = {i: tiny_scene.cameras[i].K for i in store.sets}
        model = incremental_reconstruct(sub, store, K)
        assert sorted(model.cameras) == list(key)
        assert len(model.points) >= 16
        model.check_consistency()

    def test_noise_free_full_registration(self, tiny_scene):
        store = tiny_scene.store()
        graph = build_coarse_matchgraph(store.sets)
        K = {i: tiny_scene.cameras[i].K for i in store.sets}
        model = incremental_reconstruct(graph, store, K)
        assert len(model.cameras) == 10
        rep = align_models(model, tiny_scene.ground_truth_model())
        assert rep.mean_rotation_deg < 0.01
        assert model.stage_tag == "coarse"
        for point in model.points.values():
            assert point.track_length() >= 2
        model.check_consistency()

    def test_every_camera_has_min_inliers(self, ring_scene):
        store = ring_scene.store()
        graph = build_coarse_matchgraph(store.sets)
        K = {i: ring_scene.cameras[i].K for i in store.sets}
        model = incremental_reconstruct(graph, store, K)
        # every registered camera supports at least the gate in observations
        for image_id in model.image_ids():
            assert len(model.points_visible_in(image_id)) >= 16

    def test_gauge_freedom_across_seeds(self, tiny_scene):
        store = tiny_scene.store()
        graph = build_coarse_matchgraph(store.sets)
        K = {i: tiny_scene.cameras[i].K for i in store.sets}
        m1 = incremental_reconstruct(graph, store, K, ReconstructionConfig(seed=0))
        m2 = incremental_reconstruct(graph, store, K, ReconstructionConfig(seed=99))
        rep = align_models(m1, m2)
        assert rep.mean_rotation_deg < 1e-3
        assert rep.mean_translation_rel < 1e-3

import numpy as np
import pytest
from scipy.spatial import cKDTree

from msfm.descriptors import SearchStats
from msfm.features import DESCRIPTOR_DIM, FeatureSet
from msfm.geometry import EpipolarLine, fundamental_from_poses
from msfm.guided import (
    build_grid,
    candidates_grid,
    candidates_linear,
    candidates_radial,
    clip_line_to_bounds,
    equidistant_line_points,
    group_queries,
    guided_match_pair,
)
from msfm.matching import match_pair
from msfm.model import Camera
from msfm.synth import SceneSpec, generate_scene


def random_lines(rng, n, width, height):
    out = []
    for _ in range(n):
        p0 = rng.uniform(0, [width, height])
        ang = rng.uniform(0, np.pi)
        a, b = np.sin(ang), -np.cos(ang)
        out.append(EpipolarLine(a, b, -(a * p0[0] + b * p0[1])))
    return out


class TestBuildGrid:
    def test_origin_cell_indices(self):
        grid = build_grid(np.array([[0.0, 0.0]]), 10.0, width=100, height=100)
        idx = grid.cell_indices(np.array([[0.0, 0.0]]))[0]
        assert idx.tolist() == [[0, 0], [-1, 0], [0, -1], [-1, -1]]

    def test_cell_center_formula(self):
        grid = build_grid(np.array([[25.0, 25.0]]), 10.0, width=100, height=100)
        idx = grid.cell_indices(np.array([[25.0, 25.0]]))
        centers = grid.cell_centers(idx)[0]
        assert idx[0, 0].tolist() == [1, 1]
        assert centers[0].tolist() == [30.0, 30.0]

    def test_every_feature_in_four_bins(self):
        rng = np.random.default_rng(1)
        xy = rng.uniform(0, [640, 480], size=(10_000, 2))
        grid = build_grid(xy, 8.0, width=640, height=480)
        idx = grid.cell_indices(xy)
        for g in range(4):
            members = np.concatenate([
                grid.members_of(g, np.unique(grid._encode(idx[:, g, :])))
            ])
            assert sorted(members.tolist()) == list(range(10_000))
        # members lie inside their cells
        for g in range(4):
            keys = grid._encode(idx[:, g, :])
            uniq = np.unique(keys)
            for key in uniq[:50]:
                ids = grid.members_of(g, np.array([key]))
                sub_idx = idx[ids, g, :]
                assert (grid._encode(sub_idx) == key).all()

    def test_invalid_d(self):
        with pytest.raises(ValueError):
            build_grid(np.zeros((1, 2)), 0.0, width=10, height=10)


class TestEquidistantPoints:
    def test_horizontal_line_across_image(self):
        pts = equidistant_line_points(EpipolarLine(0.0, 1.0, -50.0), (640, 480), 10.0)
        assert len(pts) == 65
        ends = {tuple(pts[0]), tuple(pts[-1])}
        assert ends == {(0.0, 50.0), (640.0, 50.0)}
        gaps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        assert (gaps <= 10.0 + 1e-9).all()

    def test_corner_clip_two_points(self):
        # a diagonal line cutting a tiny corner: segment shorter than d
        line = EpipolarLine(np.sqrt(0.5), np.sqrt(0.5), -3.0)
        pts = equidistant_line_points(line, (640, 480), 10.0)
        assert len(pts) == 2

    def test_miss_returns_empty(self):
        line = EpipolarLine(0.0, 1.0, 100.0)  # y = -100
        assert len(equidistant_line_points(line, (640, 480), 10.0)) == 0

    def test_every_band_feature_near_a_sample(self):
        rng = np.random.default_rng(2)
        xy = rng.uniform(0, [640, 480], size=(4000, 2))
        for line in random_lines(rng, 40, 640, 480):
            pts = equidistant_line_points(line, (640, 480), 8.0, pad=8.0)
            if len(pts) == 0:
                continue
            band = candidates_linear(xy, line, 8.0)
            if len(band) == 0:
                continue
            tree = cKDTree(pts)
            dist, _ = tree.query(xy[band])
            assert dist.max() <= 8.0 * np.sqrt(2.0) + 1e-9


class TestCandidateRetrieval:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.rng = rng
        self.W, self.H = 1024, 1024
        self.xy = rng.uniform(0, [self.W, self.H], size=(10_000, 2))
        self.lines = random_lines(rng, 200, self.W, self.H)
        self.d = 8.0

    def test_linear_band_inclusive(self):
        xy = np.array([[10.0, 0.0], [10.0, 8.0], [10.0, 8.0001]])
        line = EpipolarLine(0.0, 1.0, 0.0)  # y = 0
        got = candidates_linear(xy, line, 8.0)
        assert got.tolist() == [0, 1]

    def test_empty_band(self):
        line = EpipolarLine(0.0, 1.0, -2000.0)
        assert len(candidates_linear(self.xy, line, self.d)) == 0

    def test_grid_full_recall_at_default_inflation(self):
        grid = build_grid(self.xy, self.d * 1.25, width=self.W, height=self.H)
        total = hits = candidates = 0
        for line in self.lines:
            lin = set(candidates_linear(self.xy, line, self.d).tolist())
            got = set(candidates_grid(grid, line, self.d).tolist())
            total += len(lin)
            hits += len(lin & got)
            candidates += len(got)
        assert hits / total >= 0.99
        assert candidates <= 4 * total

    def test_grid_containment_at_sqrt2(self):
        grid = build_grid(self.xy, self.d * np.sqrt(2.0), width=self.W, height=self.H)
        for line in self.lines[:60]:
            lin = set(candidates_linear(self.xy, line, self.d).tolist())
            got = set(candidates_grid(grid, line, self.d).tolist())
            assert lin <= got

    def test_center_most_variant_recalls_most(self):
        grid = build_grid(self.xy, self.d * 1.25, width=self.W, height=self.H)
        total = hits = 0
        for line in self.lines:
            lin = set(candidates_linear(self.xy, line, self.d).tolist())
            got = set(candidates_grid(grid, line, self.d,
                                      cell_choice="center_most").tolist())
            total += len(lin)
            hits += len(lin & got)
        assert 0.9 <= hits / total < 1.0  # cheaper variant leaks band edges

    def test_feature_on_line_always_retrieved(self):
        rng = self.rng
        grid_pts = self.xy.copy()
        for line in self.lines[:30]:
            pts = equidistant_line_points(line, (self.W, self.H), self.d)
            if len(pts) < 3:
                continue
            on_line = pts[len(pts) // 2] + 0.01
            xy = np.vstack([grid_pts, on_line])
            grid = build_grid(xy, self.d * 1.25, width=self.W, height=self.H)
            got = candidates_grid(grid, line, self.d)
            assert len(xy) - 1 in got

    def test_empty_grid(self):
        grid = build_grid(np.zeros((0, 2)), 10.0, width=100, height=100)
        line = EpipolarLine(0.0, 1.0, -50.0)
        assert len(candidates_grid(grid, line, 10.0)) == 0

    def test_radial_high_recall(self):
        tree = cKDTree(self.xy)
        total = hits = 0
        for line in self.lines:
            lin = set(candidates_linear(self.xy, line, self.d).tolist())
            got = set(candidates_radial(tree, line, self.d, (self.W, self.H)).tolist())
            total += len(lin)
            hits += len(lin & got)
        assert hits / total >= 0.99

    def test_radial_never_beyond_geometry_bound(self):
        # a feature at distance 2d from the line is out of reach of radius
        # d*sqrt(2) disks centred on the line
        xy = np.array([[320.0, 50.0 + 16.0]])
        tree = cKDTree(xy)
        line = EpipolarLine(0.0, 1.0, -50.0)
        got = candidates_radial(tree, line, 8.0, (640, 480))
        assert len(got) == 0

    def test_radial_single_feature_at_sample(self):
        line = EpipolarLine(0.0, 1.0, -50.0)
        pts = equidistant_line_points(line, (640, 480), 8.0)
        tree = cKDTree(pts[3][None, :])
        got = candidates_radial(tree, line, 8.0, (640, 480))
        assert got.tolist() == [0]


class TestGroupQueries:
    def _pair(self, seed=5):
        scene = generate_scene(SceneSpec(n_cameras=4, n_points=500, seed=seed))
        fs_q = scene.feature_sets[0]
        fs_t = scene.feature_sets[1]
        geom = fundamental_from_poses(scene.cameras[0], scene.cameras[1])
        return scene, fs_q, fs_t, geom

    def test_identical_lines_one_group(self):
        scene, fs_q, fs_t, geom = self._pair()
        # duplicate one query feature: same position, same epipolar line
        fs_dup = FeatureSet(
            image_id=0, width=fs_q.width, height=fs_q.height,
            xy=np.vstack([fs_q.xy[:1], fs_q.xy[:1]]),
            scale=np.array([2.0, 2.0], dtype=np.float32),
            orientation=np.zeros(2, dtype=np.float32),
            descriptors=fs_q.descriptors[:2],
        )
        groups = group_queries(fs_dup, geom, (fs_t.width, fs_t.height))
        assert len(groups) == 1
        assert len(groups[0].member_features) == 2

    def test_groups_partition_queries(self):
        scene, fs_q, fs_t, geom = self._pair()
        groups = group_queries(fs_q, geom, (fs_t.width, fs_t.height))
        seen = []
        for g in groups:
            seen.extend(g.member_features.tolist())
        assert len(seen) == len(set(seen))
        # every member's own line hits the boundary within tolerance of the
        # representative's endpoints
        for g in groups[:40]:
            for fid in g.member_features:
                hom = np.append(fs_q.xy[fid].astype(np.float64), 1.0)
                l = geom.F @ hom
                l = l / np.hypot(l[0], l[1])
                clipped = clip_line_to_bounds(
                    EpipolarLine(*l), fs_t.width, fs_t.height)
                assert clipped is not None
                pa, pb = clipped
                assert np.linalg.norm(pa - g.boundary_points[0]) <= 2.0 * np.sqrt(2)
                assert np.linalg.norm(pb - g.boundary_points[1]) <= 2.0 * np.sqrt(2)

    def test_distant_boundary_hits_split(self):
        # two horizontal epipolar lines 3 px apart must land in two groups
        K = np.eye(3)
        cam_q = Camera(K=K, R=np.eye(3), t=np.zeros(3), image_id=0)
        cam_c = Camera(K=K, R=np.eye(3), t=np.array([-1.0, 0.0, 0.0]), image_id=1)
        geom = fundamental_from_poses(cam_q, cam_c)
        xy = np.array([[5.0, 7.0], [5.0, 10.0]], dtype=np.float32)
        fs = FeatureSet(image_id=0, width=100, height=100, xy=xy,
                        scale=np.ones(2, dtype=np.float32),
                        orientation=np.zeros(2, dtype=np.float32),
                        descriptors=np.zeros((2, DESCRIPTOR_DIM), dtype=np.uint8))
        groups = group_queries(fs, geom, (100.0, 100.0))
        assert len(groups) == 2


class TestGuidedMatchPair:
    def _scene_pair(self, **kw):
        spec = SceneSpec(n_cameras=2, layout="grid", ring_radius=1.2,
                         cloud_radius=2.0, n_points=kw.pop("n_points", 600),
                         seed=kw.pop("seed", 9), **kw)
        scene = generate_scene(spec)
        geom = fundamental_from_poses(scene.cameras[0], scene.cameras[1])
        return scene, geom

    def test_noise_free_recovers_oracle(self):
        scene, geom = self._scene_pair()
        fs_q, fs_t = scene.feature_sets[0], scene.feature_sets[1]
        matches = guided_match_pair(fs_q, fs_t, geom, d=8.0)
        oracle = dict(scene.oracle_matches(0, 1))
        correct = sum(1 for m in matches
                      if oracle.get(m.query.feature_id) == m.target.feature_id)
        assert len(matches) > 0
        assert correct / len(matches) >= 0.99
        # matched at least the vast majority of oracle pairs
        assert correct >= 0.95 * len(oracle)

    def test_band_respected(self):
        scene, geom = self._scene_pair(seed=10)
        fs_q, fs_t = scene.feature_sets[0], scene.feature_sets[1]
        d = 8.0
        for m in guided_match_pair(fs_q, fs_t, geom, d=d):
            hom = np.append(fs_q.xy[m.query.feature_id].astype(np.float64), 1.0)
            l = geom.F @ hom
            l = l / np.hypot(l[0], l[1])
            p = fs_t.xy[m.target.feature_id]
            dist = abs(l[0] * p[0] + l[1] * p[1] + l[2])
            assert dist <= d + 1e-6

    def test_strategies_agree_on_matches(self):
        scene, geom = self._scene_pair(seed=11)
        fs_q, fs_t = scene.feature_sets[0], scene.feature_sets[1]
        results = {}
        for strategy in ("linear", "radial", "grid"):
            results[strategy] = {
                (m.query.feature_id, m.target.feature_id)
                for m in guided_match_pair(fs_q, fs_t, geom, strategy=strategy)
            }
        assert results["grid"] == results["linear"]
        assert results["radial"] == results["linear"]

    def test_repetition_groups_guided_beats_unguided(self):
        spec = SceneSpec(n_cameras=2, layout="grid", ring_radius=1.2,
                         cloud_radius=2.0, n_points=500, seed=12,
                         repetition_groups=20, repetition_group_size=10,
                         descriptor_noise=2.0, pixel_noise=0.3)
        scene = generate_scene(spec)
        geom = fundamental_from_poses(scene.cameras[0], scene.cameras[1])
        fs_q, fs_t = scene.feature_sets[0], scene.feature_sets[1]
        oracle = dict(scene.oracle_matches(0, 1))

        def correct_count(matches):
            return sum(1 for m in matches
                       if oracle.get(m.query.feature_id) == m.target.feature_id)

        guided = guided_match_pair(fs_q, fs_t, geom, d=8.0, ratio=0.8)
        unguided = match_pair(
            fs_q, fs_t, ratio=0.6,
            query_indices=np.arange(len(fs_q)), target_indices=np.arange(len(fs_t)))
        assert correct_count(guided) > correct_count(unguided)
        precision = correct_count(guided) / len(guided)
        assert precision >= 0.95

    def test_comparison_count_bounded_by_groups(self):
        scene, geom = self._scene_pair(seed=13)
        fs_q, fs_t = scene.feature_sets[0], scene.feature_sets[1]
        stats = SearchStats()
        guided_match_pair(fs_q, fs_t, geom, d=8.0, stats=stats)
        groups = group_queries(fs_q, geom, (fs_t.width, fs_t.height))
        grid = build_grid(fs_t.xy.astype(np.float64), 8.0 * 1.25,
                          width=fs_t.width, height=fs_t.height)
        bound = 0
        for g in groups:
            cand = candidates_grid(grid, g.representative_line, 8.0)
            bound += len(g.member_features) * len(cand)
        assert stats.candidates <= bound

    def test_empty_target(self):
        scene, geom = self._scene_pair(seed=14)
        fs_q, fs_t = scene.feature_sets[0], scene.feature_sets[1]
        got = guided_match_pair(fs_q, fs_t, geom, target_indices=np.array([], dtype=int))
        assert got == []

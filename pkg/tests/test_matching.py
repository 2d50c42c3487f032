import numpy as np

from msfm.descriptors import DescriptorIndex, SearchStats, two_nearest_bruteforce
from msfm.features import DESCRIPTOR_DIM, FeatureSet, select_top_scale
from msfm.matching import (
    build_coarse_matchgraph,
    hybrid_match,
    match_pair,
    preemptive_pair_filter,
)
from msfm.synth import SceneSpec, generate_scene


def feature_set_from_descriptors(descs, image_id=0, scales=None, xy=None,
                                 width=1024, height=768):
    n = len(descs)
    rng = np.random.default_rng(image_id + 100)
    if xy is None:
        xy = rng.uniform(0, [width - 1, height - 1], size=(n, 2))
    if scales is None:
        scales = np.linspace(30.0, 1.0, n)  # already descending
    return FeatureSet.from_arrays(image_id, width, height, xy, scales,
                                  np.zeros(n), np.asarray(descs, dtype=np.uint8))


def noisy_pair(rng, n, sigma=4.0, image_ids=(0, 1)):
    """Two views of the same descriptor population, distinct bases."""
    base = rng.integers(0, 256, size=(n, DESCRIPTOR_DIM))
    a = np.clip(np.round(base + rng.normal(0, sigma, base.shape)), 0, 255)
    b = np.clip(np.round(base + rng.normal(0, sigma, base.shape)), 0, 255)
    return (feature_set_from_descriptors(a, image_ids[0]),
            feature_set_from_descriptors(b, image_ids[1]))


def brute_force_match(query_fs, target_fs, ratio):
    """Exhaustive O(m^2) oracle with the same dedup rule."""
    q = query_fs.descriptors.astype(np.float32)
    t = target_fs.descriptors.astype(np.float32)
    hits = {}
    for i in range(len(q)):
        d = np.sqrt(((t - q[i]) ** 2).sum(axis=1))
        order = np.argsort(d, kind="stable")
        if len(order) < 2:
            continue
        best, second = order[0], order[1]
        if d[second] > 0 and d[best] / d[second] < ratio:
            cur = hits.get(int(best))
            if cur is None or d[best] < cur[1]:
                hits[int(best)] = (i, float(d[best]))
    return {(qi, ti) for ti, (qi, d) in hits.items()}


class TestTwoNearest:
    def test_matches_numpy_sort(self):
        rng = np.random.default_rng(0)
        q = rng.normal(size=(40, DESCRIPTOR_DIM)).astype(np.float32)
        t = rng.normal(size=(70, DESCRIPTOR_DIM)).astype(np.float32)
        dist, idx = two_nearest_bruteforce(q, t)
        for i in range(40):
            d = np.sqrt(((t - q[i]) ** 2).sum(axis=1))
            order = np.argsort(d, kind="stable")
            assert idx[i, 0] == order[0]
            assert idx[i, 1] == order[1]

    def test_single_target(self):
        rng = np.random.default_rng(1)
        q = rng.normal(size=(5, DESCRIPTOR_DIM)).astype(np.float32)
        t = rng.normal(size=(1, DESCRIPTOR_DIM)).astype(np.float32)
        dist, idx = two_nearest_bruteforce(q, t)
        assert (idx[:, 1] == -1).all()
        assert np.isinf(dist[:, 1]).all()

    def test_kdtree_path_agrees_mostly(self):
        # approximate path: every returned neighbour must be a true neighbour
        # distance, and the vast majority must equal the exact result
        rng = np.random.default_rng(2)
        t = rng.integers(0, 256, size=(8000, DESCRIPTOR_DIM)).astype(np.float32)
        q = t[:500] + rng.normal(0, 4, size=(500, DESCRIPTOR_DIM)).astype(np.float32)
        index = DescriptorIndex(t, exact_threshold=1000, leaf_size=16, max_leaf_visits=64)
        assert not index.exact
        dist, idx = index.knn2(q)
        exact_dist, exact_idx = two_nearest_bruteforce(q, t)
        agree = (idx[:, 0] == exact_idx[:, 0]).mean()
        assert agree >= 0.95
        # the two paths accumulate in f32 with different formulas; allow
        # cancellation noise of a few 1e-3 on distances of this magnitude
        assert (dist[:, 0] >= exact_dist[:, 0] - 0.05).all()

    def test_kdtree_deterministic(self):
        rng = np.random.default_rng(3)
        t = rng.integers(0, 256, size=(7000, DESCRIPTOR_DIM)).astype(np.float32)
        q = rng.integers(0, 256, size=(100, DESCRIPTOR_DIM)).astype(np.float32)
        index1 = DescriptorIndex(t, exact_threshold=1000, leaf_size=16, max_leaf_visits=64)
        index2 = DescriptorIndex(t, exact_threshold=1000, leaf_size=16, max_leaf_visits=64)
        d1, i1 = index1.knn2(q)
        d2, i2 = index2.knn2(q)
        assert np.array_equal(i1, i2)
        assert np.array_equal(d1, d2)

    def test_stats_counting(self):
        rng = np.random.default_rng(4)
        t = rng.normal(size=(100, DESCRIPTOR_DIM)).astype(np.float32)
        stats = SearchStats()
        two_nearest_bruteforce(t[:10], t, stats)
        assert stats.queries == 10
        assert stats.candidates == 1000


class TestMatchPair:
    def test_self_match(self):
        rng = np.random.default_rng(5)
        descs = rng.integers(0, 256, size=(50, DESCRIPTOR_DIM))
        fs_a = feature_set_from_descriptors(descs, 0)
        fs_b = feature_set_from_descriptors(descs, 1)
        matches = match_pair(fs_a, fs_b, ratio=0.6)
        assert len(matches) == 50
        for m in matches:
            assert m.query.feature_id == m.target.feature_id
            assert m.distance == 0.0

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(6)
        fs_a, fs_b = noisy_pair(rng, 500)
        got = {(m.query.feature_id, m.target.feature_id)
               for m in match_pair(fs_a, fs_b, ratio=0.6)}
        expected = brute_force_match(fs_a, fs_b, 0.6)
        assert got == expected

    def test_precision_against_identity(self):
        rng = np.random.default_rng(7)
        fs_a, fs_b = noisy_pair(rng, 800)
        matches = match_pair(fs_a, fs_b, ratio=0.6)
        correct = sum(1 for m in matches if m.query.feature_id == m.target.feature_id)
        assert len(matches) > 700
        assert correct / len(matches) >= 0.99

    def test_ratio_monotone(self):
        rng = np.random.default_rng(8)
        fs_a, fs_b = noisy_pair(rng, 300, sigma=12.0)
        loose = {(m.query.feature_id, m.target.feature_id)
                 for m in match_pair(fs_a, fs_b, ratio=0.8)}
        tight = {(m.query.feature_id, m.target.feature_id)
                 for m in match_pair(fs_a, fs_b, ratio=0.5)}
        assert tight <= loose

    def test_single_candidate_cap(self):
        rng = np.random.default_rng(9)
        base = rng.integers(0, 256, size=(1, DESCRIPTOR_DIM))
        near = np.clip(base + rng.normal(0, 3, base.shape), 0, 255)
        fs_q = feature_set_from_descriptors(near, 0)
        fs_t = feature_set_from_descriptors(base, 1)
        accepted = match_pair(fs_q, fs_t, ratio=0.6, single_cap=45.0)
        assert len(accepted) == 1
        far = np.clip(base + 120, 0, 255)
        fs_q2 = feature_set_from_descriptors(far, 0)
        assert match_pair(fs_q2, fs_t, ratio=0.6, single_cap=45.0) == []

    def test_symmetry_on_noise_free_data(self):
        rng = np.random.default_rng(10)
        fs_a, fs_b = noisy_pair(rng, 200, sigma=0.0)
        ab = {(m.query.feature_id, m.target.feature_id)
              for m in match_pair(fs_a, fs_b, ratio=0.6)}
        ba = {(m.target.feature_id, m.query.feature_id)
              for m in match_pair(fs_b, fs_a, ratio=0.6)}
        assert ab == ba

    def test_target_dedup_keeps_best(self):
        rng = np.random.default_rng(11)
        target = rng.integers(0, 256, size=(3, DESCRIPTOR_DIM))
        # two queries both closest to target 0; distances differ
        q0 = np.clip(target[0].astype(float) + 1, 0, 255)
        q1 = np.clip(target[0].astype(float) + 9, 0, 255)
        fs_q = feature_set_from_descriptors(np.stack([q0, q1]), 0)
        fs_t = feature_set_from_descriptors(target, 1)
        matches = match_pair(fs_q, fs_t, ratio=0.99)
        claims = [m for m in matches if m.target.feature_id is not None]
        target_ids = [m.target.feature_id for m in matches]
        assert len(target_ids) == len(set(target_ids))
        owner = {m.target.feature_id: m.query.feature_id for m in matches}
        if 0 in owner:
            assert owner[0] == 0  # closer query wins


class TestHybridMatch:
    def _tiered_pair(self, rng, n=1500, sigma=3.0):
        fs_a, fs_b = noisy_pair(rng, n, sigma=sigma)
        return select_top_scale(fs_a, 20), select_top_scale(fs_b, 20)

    def test_stops_after_empty_first_batch(self):
        rng = np.random.default_rng(12)
        a = rng.integers(0, 100, size=(1500, DESCRIPTOR_DIM))
        b = rng.integers(156, 256, size=(1500, DESCRIPTOR_DIM))
        fs_a = select_top_scale(feature_set_from_descriptors(a, 0), 20)
        fs_b = select_top_scale(feature_set_from_descriptors(b, 1), 20)
        stats = SearchStats()
        matches = hybrid_match(fs_a, fs_b, ratio=0.6, stats=stats)
        assert len(matches) <= 4
        assert stats.queries == 150  # one 10% batch only

    def test_early_stop_after_first_batch(self):
        rng = np.random.default_rng(13)
        fs_a, fs_b = self._tiered_pair(rng)
        stats = SearchStats()
        matches = hybrid_match(fs_a, fs_b, ratio=0.6, early_stop=64, stats=stats)
        assert stats.queries == 150  # first batch already exceeds 64 matches
        assert len(matches) >= 64

    def test_subset_of_full_tier_match(self):
        rng = np.random.default_rng(14)
        fs_a, fs_b = self._tiered_pair(rng)
        hybrid = {(m.query.feature_id, m.target.feature_id)
                  for m in hybrid_match(fs_a, fs_b, ratio=0.6, early_stop=10**9)}
        full = {(m.query.feature_id, m.target.feature_id)
                for m in match_pair(fs_a, fs_b, ratio=0.6)}
        assert hybrid <= full


class TestPreemptiveFilter:
    def test_identical_images_retained(self):
        rng = np.random.default_rng(15)
        descs = rng.integers(0, 256, size=(300, DESCRIPTOR_DIM))
        sets = {0: feature_set_from_descriptors(descs, 0),
                1: feature_set_from_descriptors(descs, 1)}
        assert preemptive_pair_filter(sets) == [(0, 1)]

    def test_unrelated_images_dropped(self):
        rng = np.random.default_rng(16)
        sets = {
            i: feature_set_from_descriptors(
                rng.integers(0, 256, size=(300, DESCRIPTOR_DIM)), i)
            for i in range(2)
        }
        assert preemptive_pair_filter(sets) == []

    def test_recall_against_covisibility(self):
        scene = generate_scene(SceneSpec(
            n_cameras=12, n_points=900, visibility_fraction=0.5,
            pixel_noise=0.5, descriptor_noise=4.0, seed=31))
        store = scene.store()
        kept = set(preemptive_pair_filter(store.sets))
        mat = scene.covisibility_matrix()
        ids = sorted(store.sets)
        strong = {
            (ids[i], ids[j])
            for i in range(len(ids)) for j in range(i + 1, len(ids))
            if mat[i, j] >= 50
        }
        hit = sum(1 for pair in strong if pair in kept)
        assert hit / len(strong) >= 0.95
        # cameras on opposite sides of the ring share nothing and get dropped
        disjoint = {
            (ids[i], ids[j])
            for i in range(len(ids)) for j in range(i + 1, len(ids))
            if mat[i, j] == 0
        }
        assert disjoint
        assert not (disjoint & kept)


class TestBuildCoarseMatchGraph:
    def test_single_image_empty_graph(self):
        rng = np.random.default_rng(17)
        sets = {0: feature_set_from_descriptors(
            rng.integers(0, 256, size=(100, DESCRIPTOR_DIM)), 0)}
        graph = build_coarse_matchgraph(sets)
        assert graph.edges == {}

    def test_edges_geometry_verified(self, tiny_scene):
        store = tiny_scene.store()
        graph = build_coarse_matchgraph(store.sets)
        assert len(graph.edges) > 0
        for (a, b), edge in graph.edges.items():
            assert a < b
            assert edge.geometry is not None
            assert edge.inlier_mask.sum() >= 16
            assert len(edge.inlier_mask) == len(edge.matches)

    def test_noise_free_inliers_match_oracle(self, tiny_scene):
        scene = tiny_scene
        store = scene.store()
        graph = build_coarse_matchgraph(store.sets)
        for (a, b), edge in list(graph.edges.items())[:5]:
            oracle = dict(scene.oracle_matches(a, b))
            for m in edge.inlier_matches():
                assert oracle.get(m.query.feature_id) == m.target.feature_id

    def test_min_edge_matches_gate(self):
        rng = np.random.default_rng(18)
        # only 10 shared descriptors: below the 16-match edge gate
        base = rng.integers(0, 256, size=(10, DESCRIPTOR_DIM))
        a = np.vstack([base, rng.integers(0, 256, size=(200, DESCRIPTOR_DIM))])
        b = np.vstack([base, rng.integers(0, 256, size=(200, DESCRIPTOR_DIM))])
        sets = {0: feature_set_from_descriptors(a, 0),
                1: feature_set_from_descriptors(b, 1)}
        graph = build_coarse_matchgraph(sets)
        assert graph.edges == {}

    def test_thread_determinism(self, tiny_scene):
        store = tiny_scene.store()
        g1 = build_coarse_matchgraph(store.sets, threads=1)
        g2 = build_coarse_matchgraph(store.sets, threads=3)
        assert sorted(g1.edges) == sorted(g2.edges)
        for key in g1.edges:
            m1 = [(m.query, m.target, m.distance) for m in g1.edges[key].matches]
            m2 = [(m.query, m.target, m.distance) for m in g2.edges[key].matches]
            assert m1 == m2
            assert np.array_equal(g1.edges[key].inlier_mask, g2.edges[key].inlier_mask)

"""Unguided descriptor matching and coarse match-graph construction.

Matching is nearest-neighbour search with a ratio test.  The coarse graph is
built from high-scale tiers only, using a hybrid batched scheme that abandons
unpromising pairs early, then verifies every edge with robust two-view
geometry.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .descriptors import DescriptorIndex, SearchStats
from .features import FeatureSet
from .geometry import MIN_EDGE_INLIERS, TwoViewGeometry, estimate_fundamental_ransac
from .model import FeatureRef

RATIO_UNGUIDED = 0.6
RATIO_GUIDED = 0.8

# acceptance cap for a match whose candidate set has no second neighbour;
# 0.7 x the median distance between two noisy observations of one descriptor
# at sigma = 4 byte units (sqrt(2 * 4^2 * 128) ~ 64)
SINGLE_CANDIDATE_CAP = 45.0

HYBRID_BATCH_FRACTION = 0.10
HYBRID_CONTINUE_MIN = 4
HYBRID_EARLY_STOP = 64
MIN_EDGE_MATCHES = 16

PREEMPTIVE_TOP = 100
PREEMPTIVE_MIN_MATCHES = 4


@dataclass(frozen=True)
class Match:
    query: FeatureRef
    target: FeatureRef
    distance: float
    ratio: float


@dataclass
class Edge:
    matches: list[Match]
    geometry: TwoViewGeometry | None = None
    inlier_mask: np.ndarray | None = None

    def inlier_matches(self) -> list[Match]:
        if self.inlier_mask is None:
            return list(self.matches)
        return [m for m, keep in zip(self.matches, self.inlier_mask) if keep]


@dataclass
class MatchGraph:
    edges: dict[tuple[int, int], Edge] = field(default_factory=dict)

    def pair_key(self, a: int, b: int) -> tuple[int, int]:
        return (a, b) if a < b else (b, a)

    def get(self, a: int, b: int) -> Edge | None:
        return self.edges.get(self.pair_key(a, b))

    def neighbors(self, image_id: int) -> list[int]:
        out = []
        for a, b in self.edges:
            if a == image_id:
                out.append(b)
            elif b == image_id:
                out.append(a)
        return sorted(out)

    def match_count(self, a: int, b: int) -> int:
        edge = self.get(a, b)
        return len(edge.matches) if edge else 0


def ratio_filter(dist: np.ndarray, idx: np.ndarray, ratio: float,
                 single_cap: float = SINGLE_CANDIDATE_CAP):
    """Accepted (row, target, distance, ratio) tuples from 2-NN results.

    A missing second neighbour falls back to an absolute distance cap and
    reports ratio 0 (no competitor).
    """
    out = []
    for row in range(len(dist)):
        best, second = dist[row]
        if idx[row, 0] < 0:
            continue
        if idx[row, 1] < 0 or not np.isfinite(second):
            if best < single_cap:
                out.append((row, int(idx[row, 0]), float(best), 0.0))
            continue
        # two zero distances mean duplicated descriptors: as ambiguous as it
        # gets, so treat the ratio as 1
        r = best / second if second > 0 else 1.0
        if r < ratio:
            out.append((row, int(idx[row, 0]), float(best), float(r)))
    return out


def _dedupe_targets(cands):
    """Keep one candidate per target feature, preferring smaller distance."""
    best = {}
    for row, tgt, d, r in cands:
        cur = best.get(tgt)
        if cur is None or d < cur[2] or (d == cur[2] and row < cur[0]):
            best[tgt] = (row, tgt, d, r)
    return sorted(best.values())


def match_pair(query_fs: FeatureSet, target_fs: FeatureSet, *,
               ratio: float = RATIO_UNGUIDED,
               query_indices: np.ndarray | None = None,
               target_indices: np.ndarray | None = None,
               single_cap: float = SINGLE_CANDIDATE_CAP,
               index: DescriptorIndex | None = None,
               stats: SearchStats | None = None) -> list[Match]:
    """Match two feature sets (their coarse tiers unless indices are given)."""
    qi = query_fs.tier_indices if query_indices is None else np.asarray(query_indices)
    ti = target_fs.tier_indices if target_indices is None else np.asarray(target_indices)
    if len(qi) == 0 or len(ti) == 0:
        return []
    if index is None:
        index = DescriptorIndex(target_fs.descriptors_f32()[ti])
    dist, idx = index.knn2(query_fs.descriptors_f32()[qi], stats)
    accepted = ratio_filter(dist, idx, ratio, single_cap)
    return [
        Match(
            query=FeatureRef(query_fs.image_id, int(qi[row])),
            target=FeatureRef(target_fs.image_id, int(ti[tgt])),
            distance=d,
            ratio=r,
        )
        for row, tgt, d, r in _dedupe_targets(accepted)
    ]


def hybrid_match(query_fs: FeatureSet, target_fs: FeatureSet, *,
                 ratio: float = RATIO_UNGUIDED,
                 batch_fraction: float = HYBRID_BATCH_FRACTION,
                 continue_min: int = HYBRID_CONTINUE_MIN,
                 early_stop: int = HYBRID_EARLY_STOP,
                 single_cap: float = SINGLE_CANDIDATE_CAP,
                 stats: SearchStats | None = None) -> list[Match]:
    """Batched tier matching: high-scale query batches against the target tier.

    After the first batch the next one runs only if more than ``continue_min``
    matches accumulated; matching stops early at ``early_stop`` matches.
    """
    n_tier = query_fs.coarse_count
    if n_tier == 0 or target_fs.coarse_count == 0:
        return []
    batch = max(1, int(np.ceil(batch_fraction * len(query_fs))))
    ti = target_fs.tier_indices
    index = DescriptorIndex(target_fs.descriptors_f32()[ti])
    accepted = []
    first_done = False
    for start in range(0, n_tier, batch):
        if first_done and len(accepted) <= continue_min:
            break
        if len(accepted) >= early_stop:
            break
        qi = np.arange(start, min(start + batch, n_tier))
        dist, idx = index.knn2(query_fs.descriptors_f32()[qi], stats)
        for row, tgt, d, r in ratio_filter(dist, idx, ratio, single_cap):
            accepted.append((int(qi[row]), tgt, d, r))
        first_done = True
    return [
        Match(
            query=FeatureRef(query_fs.image_id, row),
            target=FeatureRef(target_fs.image_id, int(ti[tgt])),
            distance=d,
            ratio=r,
        )
        for row, tgt, d, r in _dedupe_targets(accepted)
    ]


def preemptive_pair_filter(feature_sets: dict[int, FeatureSet], *,
                           n_top: int = PREEMPTIVE_TOP,
                           min_matches: int = PREEMPTIVE_MIN_MATCHES,
                           ratio: float = RATIO_UNGUIDED) -> list[tuple[int, int]]:
    """Cheap pair filter: match only the top high-scale features of each pair."""
    ids = sorted(feature_sets)
    tops = {i: np.arange(min(n_top, len(feature_sets[i]))) for i in ids}
    indexes = {
        i: DescriptorIndex(feature_sets[i].descriptors_f32()[tops[i]])
        for i in ids
    }
    kept = []
    for ai in range(len(ids)):
        for bi in range(ai + 1, len(ids)):
            a, b = ids[ai], ids[bi]
            matches = match_pair(
                feature_sets[a], feature_sets[b],
                ratio=ratio, query_indices=tops[a], target_indices=tops[b],
                index=indexes[b],
            )
            if len(matches) >= min_matches:
                kept.append((a, b))
    return kept


def build_coarse_matchgraph(feature_sets: dict[int, FeatureSet], *,
                            ratio: float = RATIO_UNGUIDED,
                            preemptive: bool = False,
                            min_edge_matches: int = MIN_EDGE_MATCHES,
                            min_edge_inliers: int = MIN_EDGE_INLIERS,
                            early_stop: int = HYBRID_EARLY_STOP,
                            seed: int = 0,
                            threads: int = 1,
                            stats: SearchStats | None = None) -> MatchGraph:
    """Hybrid-match every surviving pair and keep geometry-verified edges."""
    if preemptive:
        pairs = preemptive_pair_filter(feature_sets, ratio=ratio)
    else:
        ids = sorted(feature_sets)
        pairs = [(a, b) for i, a in enumerate(ids) for b in ids[i + 1:]]

    def process(pair):
        a, b = pair
        matches = hybrid_match(feature_sets[a], feature_sets[b], ratio=ratio,
                               early_stop=early_stop, stats=stats)
        if len(matches) < min_edge_matches:
            return pair, None
        pts_q = np.array([feature_sets[a].xy[m.query.feature_id] for m in matches])
        pts_c = np.array([feature_sets[b].xy[m.target.feature_id] for m in matches])
        geom, mask = estimate_fundamental_ransac(
            pts_q, pts_c, seed=seed + a * 100003 + b)
        if int(mask.sum()) < min_edge_inliers:
            return pair, None
        return pair, Edge(matches=matches, geometry=geom, inlier_mask=mask)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(process, pairs))
    else:
        results = [process(p) for p in pairs]

    graph = MatchGraph()
    for pair, edge in sorted(results, key=lambda item: item[0]):
        if edge is not None:
            graph.edges[pair] = edge
    return graph

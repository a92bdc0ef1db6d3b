"""Three-level signature similarity and density clustering of patterns.

Backbone alignment (LCS with fuzzy service matching), deviation-set
correspondence (Hungarian assignment over eligible pairs), and service
composition overlap are fused into one score, which drives DBSCAN
clustering with a silhouette-selected epsilon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import DBSCAN
from sklearn.metrics import silhouette_score

from .fingerprint import Backbone, DeviationSubgraph, StructuralSignature


class SimilarityError(Exception):
    pass


@dataclass(frozen=True)
class SimilarityConfig:
    beta: float = 0.5
    position_tolerance: float = 0.2
    equivalence: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not (0 <= self.beta <= 1):
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if not (0 < self.position_tolerance < 1):
            raise ValueError(
                f"position_tolerance must be in (0, 1), got {self.position_tolerance}")


@dataclass(frozen=True)
class SimilarityWeights:
    w_b: float
    w_s: float
    w_c: float

    def __post_init__(self):
        if min(self.w_b, self.w_s, self.w_c) < 0:
            raise ValueError("weights must be non-negative")
        if abs(self.w_b + self.w_s + self.w_c - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")


@dataclass
class PatternCluster:
    cluster_id: int
    representative: StructuralSignature
    members: list[int]
    trace_share: float


def match_quality(s1: str, s2: str, equivalence: Mapping[str, str]) -> float:
    """1.0 for identical names, 0.8 for same functional category, else 0."""
    if s1 == s2:
        return 1.0
    c1, c2 = equivalence.get(s1), equivalence.get(s2)
    if c1 is not None and c1 == c2:
        return 0.8
    return 0.0


def sim_backbone(b1: Backbone, b2: Backbone, equivalence: Mapping[str, str]) -> float:
    """LCS-based backbone similarity over deterministic linearizations."""
    if len(b1) == 0 or len(b2) == 0:
        raise SimilarityError("backbones must be non-empty")
    a = b1.service_sequence()
    b = b2.service_sequence()
    # DP over (lcs length, product of match qualities); longer wins, then
    # higher product, which is deterministic for the fixed 1.0/0.8 scores.
    n, m = len(a), len(b)
    dp = [[(0, 1.0)] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            best = max(dp[i - 1][j], dp[i][j - 1])
            q = match_quality(a[i - 1], b[j - 1], equivalence)
            if q > 0:
                ln, pr = dp[i - 1][j - 1]
                cand = (ln + 1, pr * q)
                if cand > best:
                    best = cand
            dp[i][j] = best
    length, product = dp[n][m]
    if length == 0:
        return 0.0
    return (2.0 * length / (n + m)) * product


# ---------------------------------------------------------------------------
# Deviation subgraph similarity


def _greedy_ged_once(nodes1: Sequence, edges1: Sequence[tuple[int, int]],
                     nodes2: Sequence, edges2: Sequence[tuple[int, int]]) -> int:
    """Greedy upper bound on graph edit distance (unit costs)."""
    order1 = sorted(range(len(nodes1)), key=lambda i: (repr(nodes1[i]), i))
    avail = sorted(range(len(nodes2)), key=lambda j: (repr(nodes2[j]), j))
    mapping: dict[int, int] = {}
    for i in order1:
        if not avail:
            break
        same = [j for j in avail if nodes2[j] == nodes1[i]]
        j = same[0] if same else avail[0]
        avail.remove(j)
        mapping[i] = j
    cost = 0
    cost += len(nodes1) - len(mapping)           # deletions
    cost += len(nodes2) - len(mapping)           # insertions
    cost += sum(1 for i, j in mapping.items() if nodes1[i] != nodes2[j])
    e2 = set(tuple(e) for e in edges2)
    covered = set()
    for a, b in edges1:
        img = (mapping.get(a), mapping.get(b))
        if img[0] is not None and img[1] is not None and img in e2:
            covered.add(img)
        else:
            cost += 1
    cost += len(e2) - len(covered)
    return cost


def approx_ged(nodes1: Sequence, edges1: Sequence[tuple[int, int]],
               nodes2: Sequence, edges2: Sequence[tuple[int, int]]) -> int:
    """Symmetrized greedy GED: best of both argument orders."""
    return min(_greedy_ged_once(nodes1, edges1, nodes2, edges2),
               _greedy_ged_once(nodes2, edges2, nodes1, edges1))


def _cosine(v1: Sequence[float], v2: Sequence[float]) -> float:
    a = np.asarray(v1, dtype=float)
    b = np.asarray(v2, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def sim_subgraph(d1: DeviationSubgraph, d2: DeviationSubgraph, beta: float) -> float:
    """Hybrid structure/feature similarity of two deviation subgraphs."""
    n_max = max(len(d1.nodes) + len(d1.edges), len(d2.nodes) + len(d2.edges))
    if n_max == 0:
        structure = 1.0
    else:
        ged = approx_ged(d1.nodes, d1.edges, d2.nodes, d2.edges)
        structure = max(0.0, 1.0 - ged / n_max)
    feat = max(0.0, _cosine(d1.features, d2.features))
    return beta * structure + (1 - beta) * feat


def divergence_positions(sig: StructuralSignature) -> list[float]:
    """Normalized topological position of each deviation's divergence node."""
    topo = sig.backbone.topological_order()
    pos = {n: i for i, n in enumerate(topo)}
    n = len(topo)
    if n <= 1:
        return [0.0 for _ in sig.deviations]
    return [pos[d.divergence] / (n - 1) for d in sig.deviations]


def sim_subgraph_sets(s1: Sequence[DeviationSubgraph], s2: Sequence[DeviationSubgraph],
                      config: SimilarityConfig,
                      positions1: Optional[Sequence[float]] = None,
                      positions2: Optional[Sequence[float]] = None) -> float:
    """Aggregate deviation similarity via constrained bipartite assignment.

    Pairs are eligible only when kinds agree and divergence positions are
    within the tolerance; both sets empty scores 1.0, one empty scores 0.0.
    """
    if not s1 and not s2:
        return 1.0
    if not s1 or not s2:
        return 0.0
    p1 = positions1 if positions1 is not None else [0.0] * len(s1)
    p2 = positions2 if positions2 is not None else [0.0] * len(s2)
    sim = np.zeros((len(s1), len(s2)))
    for i, d1 in enumerate(s1):
        for j, d2 in enumerate(s2):
            if d1.kind != d2.kind:
                continue
            if abs(p1[i] - p2[j]) >= config.position_tolerance:
                continue
            sim[i, j] = sim_subgraph(d1, d2, config.beta)
    rows, cols = linear_sum_assignment(-sim)
    total = float(sim[rows, cols].sum())
    return total / max(len(s1), len(s2))


def sim_composition(s1: StructuralSignature, s2: StructuralSignature,
                    equivalence: Mapping[str, str]) -> float:
    """Category-smoothed Jaccard overlap of service name sets."""
    set1, set2 = set(s1.service_set), set(s2.service_set)
    if not set1 and not set2:
        return 1.0
    exact = set1 & set2
    rest1 = sorted(set1 - exact)
    rest2 = sorted(set2 - exact)
    score = float(len(exact))
    matched = len(exact)
    used2: set[str] = set()
    for a in rest1:
        for b in rest2:
            if b in used2:
                continue
            if match_quality(a, b, equivalence) == 0.8:
                score += 0.8
                matched += 1
                used2.add(b)
                break
    union = len(set1) + len(set2) - matched
    return score / union if union else 1.0


def sim_overall(s1: StructuralSignature, s2: StructuralSignature,
                weights: SimilarityWeights, config: SimilarityConfig) -> float:
    """Convex combination of backbone, deviation-set, and composition scores."""
    bg = sim_backbone(s1.backbone, s2.backbone, config.equivalence)
    sg = sim_subgraph_sets(s1.deviations, s2.deviations, config,
                           divergence_positions(s1), divergence_positions(s2))
    comp = sim_composition(s1, s2, config.equivalence)
    return weights.w_b * bg + weights.w_s * sg + weights.w_c * comp


def infer_weights(history: Sequence[StructuralSignature],
                  config: Optional[SimilarityConfig] = None) -> SimilarityWeights:
    """Weight channels by their pairwise-similarity dispersion over history."""
    if len(history) < 2:
        raise SimilarityError("weight inference needs at least 2 signatures")
    config = config or SimilarityConfig()
    bg_vals, sg_vals = [], []
    for i in range(len(history)):
        for j in range(i + 1, len(history)):
            a, b = history[i], history[j]
            bg_vals.append(sim_backbone(a.backbone, b.backbone, config.equivalence))
            sg_vals.append(sim_subgraph_sets(
                a.deviations, b.deviations, config,
                divergence_positions(a), divergence_positions(b)))
    std_b = float(np.std(bg_vals))
    std_s = float(np.std(sg_vals))
    if std_b + std_s == 0:
        return SimilarityWeights(0.45, 0.45, 0.1)
    w_b = 0.9 * std_b / (std_b + std_s)
    return SimilarityWeights(w_b, 0.9 - w_b, 0.1)


# ---------------------------------------------------------------------------
# Clustering


def dedupe_signatures(signatures: Sequence[StructuralSignature],
                      ) -> tuple[list[StructuralSignature], list[int], list[int]]:
    """Collapse structurally identical signatures.

    Returns (unique signatures, multiplicity per unique, original -> unique
    index map).
    """
    keys: dict[str, int] = {}
    unique: list[StructuralSignature] = []
    counts: list[int] = []
    inverse: list[int] = []
    for sig in signatures:
        key = sig.canonical_key()
        if key not in keys:
            keys[key] = len(unique)
            unique.append(sig)
            counts.append(0)
        idx = keys[key]
        counts[idx] += 1
        inverse.append(idx)
    return unique, counts, inverse


def distance_matrix(signatures: Sequence[StructuralSignature],
                    weights: SimilarityWeights, config: SimilarityConfig) -> np.ndarray:
    n = len(signatures)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = 1.0 - sim_overall(signatures[i], signatures[j], weights, config)
            dist[i, j] = dist[j, i] = max(0.0, d)
    return dist


def cluster_signatures(signatures: Sequence[StructuralSignature],
                       config: SimilarityConfig, min_samples: int = 4,
                       weights: Optional[SimilarityWeights] = None,
                       sample_weight: Optional[Sequence[float]] = None,
                       eps_grid_size: int = 20,
                       ) -> tuple[list[PatternCluster], list[int], np.ndarray]:
    """DBSCAN over 1 - overall similarity with silhouette-picked epsilon.

    Returns (clusters, noise indices, label array). `sample_weight` lets
    deduplicated signatures stand for their multiplicity.
    """
    if not signatures:
        raise SimilarityError("cannot cluster an empty signature collection")
    if weights is None:
        weights = (infer_weights(signatures, config) if len(signatures) >= 2
                   else SimilarityWeights(0.45, 0.45, 0.1))
    sw = np.asarray(sample_weight, dtype=float) if sample_weight is not None \
        else np.ones(len(signatures))
    dist = distance_matrix(signatures, weights, config)

    n = len(signatures)
    positive = dist[np.triu_indices(n, k=1)]
    positive = positive[positive > 0]
    if positive.size == 0:
        candidates = np.array([0.5])
    else:
        candidates = np.linspace(float(positive.min()), float(positive.max()),
                                 eps_grid_size)
        candidates = candidates[candidates > 0]

    best_labels = None
    best_score = -math.inf
    fallback_labels = None
    fallback_count = -1
    for eps in candidates:
        labels = DBSCAN(eps=float(eps), min_samples=min_samples,
                        metric="precomputed").fit(dist, sample_weight=sw).labels_
        core = labels != -1
        n_clusters = len(set(labels[core]))
        if n_clusters > fallback_count:
            fallback_count = n_clusters
            fallback_labels = labels
        if n_clusters >= 2 and core.sum() > n_clusters:
            try:
                score = silhouette_score(dist[np.ix_(core, core)], labels[core],
                                         metric="precomputed")
            except ValueError:
                continue
            if score > best_score + 1e-12:
                best_score = score
                best_labels = labels
    labels = best_labels if best_labels is not None else fallback_labels
    if labels is None:
        labels = np.full(n, -1)

    total_weight = float(sw.sum())
    clusters: list[PatternCluster] = []
    for cid in sorted(set(labels) - {-1}):
        members = [i for i in range(n) if labels[i] == cid]
        sub = dist[np.ix_(members, members)]
        medoid = members[int(np.argmin((sub * sw[members]).sum(axis=1)))]
        share = float(sw[members].sum()) / total_weight
        clusters.append(PatternCluster(int(cid), signatures[medoid], members, share))
    noise = [i for i in range(n) if labels[i] == -1]
    return clusters, noise, labels

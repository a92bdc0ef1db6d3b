"""Structural fingerprinting of trace collections.

A fingerprint is a stable backbone (the frequent, criticality-maximal
call chain, possibly with a few grafted branches) plus a set of deviation
subgraphs (retry / fanout / fallback / async structures hanging off it).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Optional, Sequence

from .trace_model import (
    InvocationPath,
    TraceGraph,
    root_to_leaf_paths,
    e2e_latency,
    self_latency,
)

Segment = tuple[str, ...]


class FingerprintError(Exception):
    pass


@dataclass(frozen=True)
class FingerprintConfig:
    k: int = 3
    theta: float = 0.5
    alpha: float = 0.5
    delta_max: int = 5
    branch_budget: int = 3

    def __post_init__(self):
        if not (0 < self.theta <= 1):
            raise ValueError(f"theta must be in (0, 1], got {self.theta}")
        if not (0 <= self.alpha <= 1):
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")
        if self.delta_max < 1:
            raise ValueError(f"delta_max must be >= 1, got {self.delta_max}")


@dataclass(frozen=True)
class ScoredSegment:
    services: Segment
    support: float
    criticality: float


@dataclass
class Backbone:
    """Service-invocation DAG; node ids are small ints, root is node 0."""

    services: list[str]
    edges: list[tuple[int, int]]
    root: int = 0

    def __post_init__(self):
        self._children: dict[int, list[int]] = {i: [] for i in range(len(self.services))}
        for a, b in self.edges:
            self._children[a].append(b)
        for kids in self._children.values():
            kids.sort(key=lambda n: (self.services[n], n))

    def children(self, node: int) -> list[int]:
        return self._children[node]

    def branching_count(self) -> int:
        return sum(1 for kids in self._children.values() if len(kids) >= 2)

    def topological_order(self) -> list[int]:
        # Kahn's algorithm with (service, id) tie-break for reproducibility.
        indeg = {i: 0 for i in range(len(self.services))}
        for _, b in self.edges:
            indeg[b] += 1
        ready = sorted((n for n, d in indeg.items() if d == 0),
                       key=lambda n: (self.services[n], n))
        order = []
        while ready:
            n = ready.pop(0)
            order.append(n)
            for c in self._children[n]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
            ready.sort(key=lambda n: (self.services[n], n))
        if len(order) != len(self.services):
            raise FingerprintError("backbone contains a cycle")
        return order

    def service_sequence(self) -> list[str]:
        return [self.services[n] for n in self.topological_order()]

    def paths(self) -> list[tuple[str, ...]]:
        """All root-to-leaf service paths."""
        out: list[tuple[str, ...]] = []

        def walk(n: int, prefix: list[str]) -> None:
            prefix.append(self.services[n])
            if not self._children[n]:
                out.append(tuple(prefix))
            else:
                for c in self._children[n]:
                    walk(c, prefix)
            prefix.pop()

        walk(self.root, [])
        return out

    def path_to(self, node: int) -> tuple[str, ...]:
        """Service path from the root to a node (first found in child order)."""

        def walk(n: int, prefix: list[str]) -> Optional[tuple[str, ...]]:
            prefix.append(self.services[n])
            if n == node:
                return tuple(prefix)
            for c in self._children[n]:
                got = walk(c, prefix)
                if got is not None:
                    return got
            prefix.pop()
            return None

        got = walk(self.root, [])
        if got is None:
            raise FingerprintError(f"node {node} unreachable from backbone root")
        return got

    def __len__(self) -> int:
        return len(self.services)


@dataclass
class DeviationSubgraph:
    """One deviation structure: span-template nodes hanging off the backbone.

    `nodes` are (depth, service) templates from a representative instance,
    `features` is [depth, width, node_count, p_exec, p_fail].
    """

    nodes: tuple[tuple[int, str], ...]
    edges: tuple[tuple[int, int], ...]
    divergence: int
    merge: Optional[int]
    features: tuple[float, float, float, float, float]
    kind: str

    @property
    def p_exec(self) -> float:
        return self.features[3]

    @property
    def p_fail(self) -> float:
        return self.features[4]

    @property
    def node_count(self) -> int:
        return int(self.features[2])


@dataclass
class StructuralSignature:
    backbone: Backbone
    deviations: list[DeviationSubgraph]
    service_set: frozenset[str]

    def canonical_key(self) -> str:
        """Stable string key: equal keys iff structurally identical signatures."""
        payload = {
            "backbone": {
                "services": self.backbone.services,
                "edges": sorted(self.backbone.edges),
            },
            "deviations": sorted(
                (d.divergence, d.merge if d.merge is not None else -1, d.kind,
                 d.nodes, d.edges, tuple(round(f, 9) for f in d.features))
                for d in self.deviations
            ),
            "services": sorted(self.service_set),
        }
        return json.dumps(payload, sort_keys=True)


# ---------------------------------------------------------------------------
# k-gram mining


def kgram_decompose(path: InvocationPath | Sequence[str], k: int) -> list[Segment]:
    """Overlapping length-k windows; a shorter path yields itself whole."""
    services = tuple(path.services if isinstance(path, InvocationPath) else path)
    if not services:
        raise FingerprintError("cannot decompose an empty path")
    if k < 2:
        raise FingerprintError(f"k must be >= 2, got {k}")
    if len(services) < k:
        return [services]
    return [services[i:i + k] for i in range(len(services) - k + 1)]


def _trace_segments(trace: TraceGraph, k: int) -> set[Segment]:
    segs: set[Segment] = set()
    for path in root_to_leaf_paths(trace):
        segs.update(kgram_decompose(path, k))
    return segs


def segment_support(segment: Segment, traces: Sequence[TraceGraph], k: Optional[int] = None) -> float:
    """Fraction of traces containing the segment contiguously on some path."""
    if not traces:
        raise FingerprintError("support is undefined on an empty trace collection")
    seg = tuple(segment)
    n = 0
    for trace in traces:
        if any(_contains_contiguous(p.services, seg) for p in root_to_leaf_paths(trace)):
            n += 1
    return n / len(traces)


def _contains_contiguous(path: Sequence[str], seg: Segment) -> bool:
    m = len(seg)
    return any(tuple(path[i:i + m]) == seg for i in range(len(path) - m + 1))


def _matched_spans(trace: TraceGraph, seg: Segment) -> set[str]:
    """Span ids covered by any contiguous occurrence of seg on a root-to-leaf path."""
    matched: set[str] = set()
    span_paths: list[list[str]] = []

    def walk(sid: str, prefix: list[str]) -> None:
        prefix.append(sid)
        kids = trace._children[sid]
        if not kids:
            span_paths.append(list(prefix))
        else:
            for cid in kids:
                walk(cid, prefix)
        prefix.pop()

    walk(trace.root_id, [])
    m = len(seg)
    for sp_path in span_paths:
        names = [trace.spans[s].service for s in sp_path]
        for i in range(len(names) - m + 1):
            if tuple(names[i:i + m]) == seg:
                matched.update(sp_path[i:i + m])
    return matched


def criticality(segment: Segment, traces: Sequence[TraceGraph], alpha: float) -> float:
    """Blend of latency share and downstream-reach share of a segment.

    Traces not containing the segment contribute 0 to both terms; a trace
    with zero end-to-end latency contributes 0 to the latency term.
    """
    if not traces:
        raise FingerprintError("criticality is undefined on an empty trace collection")
    seg = tuple(segment)
    lat_sum = 0.0
    reach_sum = 0.0
    for trace in traces:
        matched = _matched_spans(trace, seg)
        if not matched:
            continue
        e2e = e2e_latency(trace)
        if e2e > 0:
            lat = sum(self_latency(trace.spans[s], trace) for s in matched)
            lat_sum += min(1.0, lat / e2e)
        downstream: set[str] = set()
        stack = [c for s in matched for c in trace._children[s]]
        while stack:
            sid = stack.pop()
            if sid in downstream:
                continue
            downstream.add(sid)
            stack.extend(trace._children[sid])
        reach_sum += len(downstream - matched) / len(trace)
    n = len(traces)
    return alpha * (lat_sum / n) + (1 - alpha) * (reach_sum / n)


def mine_segments(traces: Sequence[TraceGraph],
                  config: FingerprintConfig) -> tuple[list[ScoredSegment], set[Segment]]:
    """Frequent segments with scores, plus the set of path-prefix segments.

    Prefix segments (those opening some root-to-leaf path) anchor backbone
    assembly at the entry service.
    """
    if not traces:
        raise FingerprintError("empty trace collection")
    counts: dict[Segment, int] = {}
    prefix_segments: set[Segment] = set()
    for trace in traces:
        segs_here: set[Segment] = set()
        for path in root_to_leaf_paths(trace):
            grams = kgram_decompose(path, config.k)
            segs_here.update(grams)
            prefix_segments.add(grams[0])
        for seg in segs_here:
            counts[seg] = counts.get(seg, 0) + 1
    n = len(traces)
    scored = []
    for seg, c in sorted(counts.items()):
        support = c / n
        if support >= config.theta:
            scored.append(ScoredSegment(seg, support, criticality(seg, traces, config.alpha)))
    return scored, prefix_segments


def score_segments(traces: Sequence[TraceGraph], config: FingerprintConfig) -> list[ScoredSegment]:
    """All frequent segments with support and criticality scores."""
    return mine_segments(traces, config)[0]


# ---------------------------------------------------------------------------
# Backbone extraction


def _best_chain(segments: list[ScoredSegment], k: int,
                starts: set[Segment]) -> list[ScoredSegment]:
    """Highest-total-criticality simple chain under suffix-prefix alignment.

    Ties break toward the lexicographically smaller service sequence. Falls
    back to exhaustive DFS over simple chains when the alignment graph has
    cycles (repeated-service patterns); exact either way.
    """
    succ: dict[int, list[int]] = {i: [] for i in range(len(segments))}
    for i, a in enumerate(segments):
        if len(a.services) != k:
            continue
        for j, b in enumerate(segments):
            if i == j or len(b.services) != k:
                continue
            if a.services[1:] == b.services[:-1]:
                succ[i].append(j)

    start_idx = [i for i, s in enumerate(segments) if s.services in starts]
    if not start_idx:
        start_idx = list(range(len(segments)))

    def seq_of(chain: list[int]) -> tuple[str, ...]:
        seq = list(segments[chain[0]].services)
        for idx in chain[1:]:
            seq.append(segments[idx].services[-1])
        return tuple(seq)

    best: tuple[float, tuple[str, ...], list[int]] | None = None

    def consider(chain: list[int], score: float) -> None:
        nonlocal best
        seq = seq_of(chain)
        if best is None or score > best[0] + 1e-12 or (
                abs(score - best[0]) <= 1e-12 and seq < best[1]):
            best = (score, seq, list(chain))

    # Detect a cycle in the successor graph to choose the strategy.
    color: dict[int, int] = {}

    def has_cycle(u: int) -> bool:
        color[u] = 1
        for v in succ[u]:
            if color.get(v, 0) == 1:
                return True
            if color.get(v, 0) == 0 and has_cycle(v):
                return True
        color[u] = 2
        return False

    cyclic = any(color.get(u, 0) == 0 and has_cycle(u) for u in succ)

    if not cyclic:
        # Longest-path DP over the segment DAG.
        order: list[int] = []
        state: dict[int, int] = {}

        def topo(u: int) -> None:
            state[u] = 1
            for v in succ[u]:
                if v not in state:
                    topo(v)
            order.append(u)

        for u in range(len(segments)):
            if u not in state:
                topo(u)
        bestval: dict[int, tuple[float, list[int]]] = {}
        for u in order:  # reverse topological: successors first
            cand = (segments[u].criticality, [u])
            for v in succ[u]:
                sv, chain = bestval[v]
                total = segments[u].criticality + sv
                seq = seq_of([u] + chain)
                cur_seq = seq_of(cand[1])
                if total > cand[0] + 1e-12 or (abs(total - cand[0]) <= 1e-12 and seq < cur_seq):
                    cand = (total, [u] + chain)
            bestval[u] = cand
        for u in start_idx:
            consider(bestval[u][1], bestval[u][0])
    else:
        # Exhaustive DFS over simple chains (each segment used once).
        def dfs(u: int, chain: list[int], score: float, used: set[int]) -> None:
            consider(chain, score)
            for v in succ[u]:
                if v not in used:
                    used.add(v)
                    chain.append(v)
                    dfs(v, chain, score + segments[v].criticality, used)
                    chain.pop()
                    used.remove(v)

        for u in start_idx:
            dfs(u, [u], segments[u].criticality, {u})

    assert best is not None
    return [segments[i] for i in best[2]]


def _graft_branches(services: list[str], edges: list[tuple[int, int]],
                    chain_segs: list[ScoredSegment], pool: list[ScoredSegment],
                    config: FingerprintConfig) -> None:
    """Attach high-criticality leftover segments at aligned backbone nodes."""
    if not pool:
        return
    mean_theta = sum(s.criticality for s in chain_segs) / len(chain_segs)
    cutoff = 0.8 * mean_theta
    candidates = sorted(
        (s for s in pool if s.criticality >= cutoff),
        key=lambda s: (-s.criticality, s.services),
    )
    backbone = Backbone(list(services), list(edges))
    for seg in candidates:
        if backbone.branching_count() >= config.branch_budget:
            break
        attach = _align_segment(backbone, seg.services)
        if attach is None:
            continue
        node, remainder = attach
        if not remainder:
            continue
        prev = node
        for svc in remainder:
            services.append(svc)
            edges.append((prev, len(services) - 1))
            prev = len(services) - 1
        backbone = Backbone(list(services), list(edges))


def _align_segment(backbone: Backbone, seg: Segment) -> Optional[tuple[int, Segment]]:
    """Longest prefix of seg matching a backbone path suffix; returns
    (attachment node, unmatched remainder)."""
    best: Optional[tuple[int, int]] = None  # (matched_len, node)

    def walk(n: int, prefix: list[int]) -> None:
        nonlocal best
        prefix.append(n)
        names = [backbone.services[p] for p in prefix]
        for ell in range(min(len(seg), len(names)), 0, -1):
            if tuple(names[-ell:]) == seg[:ell]:
                if best is None or ell > best[0]:
                    best = (ell, n)
                break
        for c in backbone.children(n):
            walk(c, prefix)
        prefix.pop()

    walk(backbone.root, [])
    if best is None:
        return None
    ell, node = best
    return node, seg[ell:]


def extract_backbone(traces: Sequence[TraceGraph], config: FingerprintConfig) -> Backbone:
    """Assemble the frequent, criticality-maximal backbone DAG."""
    scored, prefixes = mine_segments(traces, config)
    if not scored:
        raise FingerprintError(
            f"no frequent segments at theta={config.theta}; lower the threshold")
    chain = _best_chain(scored, config.k, prefixes)
    seq = list(chain[0].services)
    for seg in chain[1:]:
        seq.append(seg.services[-1])
    services = list(seq)
    edges = [(i, i + 1) for i in range(len(seq) - 1)]
    in_chain = {id(s) for s in chain}
    pool = [s for s in scored if id(s) not in in_chain]
    _graft_branches(services, edges, chain, pool, config)
    return Backbone(services, edges)


# ---------------------------------------------------------------------------
# Deviation extraction


def map_trace_to_backbone(trace: TraceGraph, backbone: Backbone) -> dict[str, int]:
    """Greedy root-down alignment of trace spans onto backbone nodes.

    Each backbone child is consumed by at most one child span per aligned
    parent, so a retried call maps its first attempt only.
    """
    mapping: dict[str, int] = {}
    if trace.root.service != backbone.services[backbone.root]:
        return mapping
    mapping[trace.root_id] = backbone.root
    stack = [trace.root_id]
    while stack:
        sid = stack.pop()
        bnode = mapping[sid]
        free = list(backbone.children(bnode))
        for child in trace.children(sid):
            hit = next((b for b in free if backbone.services[b] == child.service), None)
            if hit is not None:
                free.remove(hit)
                mapping[child.span_id] = hit
                stack.append(child.span_id)
    return mapping


def extract_deviations(traces: Sequence[TraceGraph], backbone: Backbone,
                       config: FingerprintConfig) -> list[DeviationSubgraph]:
    """Bounded BFS off every divergence point, aggregated across traces."""
    topo = backbone.topological_order()
    topo_pos = {n: i for i, n in enumerate(topo)}
    groups: dict[tuple, dict] = {}

    for trace in traces:
        mapping = map_trace_to_backbone(trace, backbone)
        if not mapping:
            continue
        owned = _collect_trace_deviations(trace, backbone, mapping, topo_pos, config)
        seen_keys: set[tuple] = set()
        for inst in owned:
            key = inst["key"]
            g = groups.setdefault(key, {
                "count": 0, "fail_sum": 0.0, "rep": inst,
            })
            if key not in seen_keys:
                g["count"] += 1
                seen_keys.add(key)
            errs = sum(1 for s in inst["spans"] if trace.spans[s].error)
            g["fail_sum"] += errs / len(inst["spans"])
            g["fail_n"] = g.get("fail_n", 0) + 1

    n_traces = len(traces)
    out = []
    for key in sorted(groups, key=repr):
        g = groups[key]
        inst = g["rep"]
        depth = max(d for d, _ in inst["nodes"])
        by_depth: dict[int, int] = {}
        for d, _ in inst["nodes"]:
            by_depth[d] = by_depth.get(d, 0) + 1
        width = max(by_depth.values())
        p_exec = g["count"] / n_traces
        p_fail = g["fail_sum"] / g["fail_n"]
        out.append(DeviationSubgraph(
            nodes=inst["nodes"],
            edges=inst["edges"],
            divergence=inst["divergence"],
            merge=inst["merge"],
            features=(float(depth), float(width), float(len(inst["nodes"])),
                      p_exec, p_fail),
            kind=inst["kind"],
        ))
    return out


def _collect_trace_deviations(trace: TraceGraph, backbone: Backbone,
                              mapping: dict[str, int], topo_pos: dict[int, int],
                              config: FingerprintConfig) -> list[dict]:
    """Per-trace deviation instances with disjoint node ownership."""
    unmapped = [sid for sid in trace.spans if sid not in mapping]
    if not unmapped:
        return []
    # Divergence points in backbone topological order; earliest owner wins.
    divergences: list[tuple[int, str]] = []
    for sid, bnode in mapping.items():
        if any(c.span_id not in mapping for c in trace.children(sid)):
            divergences.append((bnode, sid))
    divergences.sort(key=lambda t: (topo_pos[t[0]], t[1]))

    owner: dict[str, int] = {}
    instances: list[dict] = []
    for bnode, div_sid in divergences:
        spans: list[str] = []
        depths: dict[str, int] = {}
        merge: Optional[int] = None
        frontier = [c.span_id for c in trace.children(div_sid) if c.span_id not in mapping]
        depth = 1
        while frontier and depth <= config.delta_max:
            nxt: list[str] = []
            for sid in frontier:
                if sid in owner:
                    continue
                owner[sid] = bnode
                spans.append(sid)
                depths[sid] = depth
                for c in trace.children(sid):
                    cid = c.span_id
                    if cid in mapping:
                        m = mapping[cid]
                        if merge is None or topo_pos[m] < topo_pos[merge]:
                            merge = m
                    elif cid not in owner:
                        nxt.append(cid)
            frontier = nxt
            depth += 1
        if not spans:
            continue
        nodes = tuple(sorted((depths[s], trace.spans[s].service) for s in spans))
        edge_set = set()
        idx = {s: i for i, s in enumerate(sorted(spans, key=lambda s: (depths[s], trace.spans[s].service, s)))}
        for s in spans:
            for c in trace.children(s):
                if c.span_id in idx and s in idx:
                    edge_set.add((idx[s], idx[c.span_id]))
        kind = _classify(trace, div_sid, spans, depths, merge)
        key = (bnode, merge if merge is not None else -1, nodes, kind)
        instances.append({
            "key": key, "spans": spans, "nodes": nodes,
            "edges": tuple(sorted(edge_set)),
            "divergence": bnode, "merge": merge, "kind": kind,
        })
    return instances


def _classify(trace: TraceGraph, div_sid: str, spans: list[str],
              depths: dict[str, int], merge: Optional[int]) -> str:
    """Rule-based deviation kind tagging."""
    span_set = set(spans)
    # retry: repeated sibling invocations of one service under the divergence node
    sibling_services = [c.service for c in trace.children(div_sid)]
    dev_child_services = [trace.spans[s].service for s in spans if depths[s] == 1]
    for svc in dev_child_services:
        if sibling_services.count(svc) >= 2:
            return "retry"
    # fanout: width >= 2 distinct same-depth children
    by_depth: dict[int, set[str]] = {}
    for s in spans:
        by_depth.setdefault(depths[s], set()).add(trace.spans[s].service)
    if any(len(svcs) >= 2 for svcs in by_depth.values()):
        return "fanout"
    # fallback: alternative service following an error-flagged sibling
    for s in spans:
        sp = trace.spans[s]
        parent = sp.parent_id
        if parent is None:
            continue
        for sib in trace.children(parent):
            if (sib.span_id != s and sib.start <= sp.start
                    and sib.error and sib.service != sp.service):
                return "fallback"
    if merge is None:
        return "async"
    return "other"


# ---------------------------------------------------------------------------
# Composition and export


def fingerprint(traces: Sequence[TraceGraph], config: FingerprintConfig) -> StructuralSignature:
    """Backbone + deviations + observed service set for a trace collection."""
    if not traces:
        raise FingerprintError("cannot fingerprint an empty trace collection")
    backbone = extract_backbone(traces, config)
    deviations = extract_deviations(traces, backbone, config)
    services = frozenset(sp.service for t in traces for sp in t.spans.values())
    return StructuralSignature(backbone, deviations, services)


def signature_to_dict(sig: StructuralSignature, config: Optional[FingerprintConfig] = None) -> dict:
    doc = {
        "backbone": {
            "services": sig.backbone.services,
            "edges": [list(e) for e in sig.backbone.edges],
            "root": sig.backbone.root,
        },
        "deviations": [
            {
                "nodes": [list(n) for n in d.nodes],
                "edges": [list(e) for e in d.edges],
                "divergence": d.divergence,
                "merge": d.merge,
                "features": list(d.features),
                "kind": d.kind,
            }
            for d in sig.deviations
        ],
        "service_set": sorted(sig.service_set),
    }
    if config is not None:
        doc["config"] = {
            "k": config.k, "theta": config.theta, "alpha": config.alpha,
            "delta_max": config.delta_max, "branch_budget": config.branch_budget,
        }
    return doc


def signature_from_dict(doc: dict) -> StructuralSignature:
    bb = doc["backbone"]
    backbone = Backbone(list(bb["services"]), [tuple(e) for e in bb["edges"]], bb.get("root", 0))
    deviations = [
        DeviationSubgraph(
            nodes=tuple(tuple(n) for n in d["nodes"]),
            edges=tuple(tuple(e) for e in d["edges"]),
            divergence=d["divergence"],
            merge=d["merge"],
            features=tuple(d["features"]),
            kind=d["kind"],
        )
        for d in doc["deviations"]
    ]
    return StructuralSignature(backbone, deviations, frozenset(doc["service_set"]))


def export_signature(sig: StructuralSignature, stream: IO[str],
                     config: Optional[FingerprintConfig] = None) -> None:
    json.dump(signature_to_dict(sig, config), stream, indent=2, sort_keys=True)
    stream.write("\n")


def import_signature(stream: IO[str]) -> StructuralSignature:
    return signature_from_dict(json.load(stream))

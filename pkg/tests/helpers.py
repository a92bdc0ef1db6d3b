"""Shared builders for the test suite: traces, corpora, and signatures."""

from __future__ import annotations

from collections import Counter

import numpy as np

from tracealloc.costmodel import AnalyticalCostModel, ServiceCostParams, build_cache
from tracealloc.fingerprint import Backbone, DeviationSubgraph, StructuralSignature
from tracealloc.optimizer import CriticalPathSet, SloSpace
from tracealloc.trace_model import Span, TraceGraph

DEVIATION_KINDS = ("retry", "fanout", "fallback", "async", "other")


def chain_trace(trace_id: str, services, work: int = 1000, start: int = 0) -> TraceGraph:
    """Nested call chain: each span does `work` then calls the next service."""
    n = len(services)
    spans = []
    for i, svc in enumerate(services):
        spans.append(Span(
            span_id=f"{trace_id}-{i}",
            parent_id=None if i == 0 else f"{trace_id}-{i - 1}",
            service=svc,
            operation="root" if i == 0 else "call",
            start=start + i * work,
            duration=work * (n - i),
        ))
    return TraceGraph(trace_id, spans)


def random_tree_trace(rng, trace_id: str, service_pool, max_spans: int = 12,
                      max_children: int = 3, work_range=(100, 5000),
                      error_prob: float = 0.05) -> TraceGraph:
    """Random well-nested call tree with sequential children."""
    counter = [0]
    spans = []

    def build(parent_id, start, depth):
        sid = f"{trace_id}-{counter[0]}"
        counter[0] += 1
        svc = str(service_pool[int(rng.integers(0, len(service_pool)))])
        work = int(rng.integers(work_range[0], work_range[1]))
        t = start + work
        kids = 0
        while (depth < 4 and counter[0] < max_spans and kids < max_children
               and rng.random() < 0.55):
            t = build(sid, t, depth + 1)
            kids += 1
        spans.append(Span(
            span_id=sid, parent_id=parent_id, service=svc,
            operation="call" if parent_id else "root",
            start=int(start), duration=int(t - start),
            error=bool(rng.random() < error_prob)))
        return t

    build(None, 0, 0)
    return TraceGraph(trace_id, spans)


def random_signature(rng, max_deviations: int = 6,
                     pool=None) -> StructuralSignature:
    """Random chain backbone with a random deviation set."""
    pool = pool or [f"svc{i}" for i in range(8)]
    n = int(rng.integers(2, 6))
    picks = rng.choice(len(pool), size=n, replace=False)
    services = [pool[int(i)] for i in picks]
    backbone = Backbone(list(services), [(i, i + 1) for i in range(n - 1)])
    devs = []
    for _ in range(int(rng.integers(0, max_deviations + 1))):
        m = int(rng.integers(1, 4))
        nodes = tuple(sorted(
            (int(rng.integers(1, 3)), str(pool[int(rng.integers(0, len(pool)))]))
            for _ in range(m)))
        dedges = tuple(sorted(
            (a, b) for a in range(m) for b in range(a + 1, m)
            if rng.random() < 0.4))
        depth = max(d for d, _ in nodes)
        width = max(Counter(d for d, _ in nodes).values())
        devs.append(DeviationSubgraph(
            nodes=nodes, edges=dedges,
            divergence=int(rng.integers(0, n)),
            merge=None if rng.random() < 0.5 else int(rng.integers(0, n)),
            features=(float(depth), float(width), float(m),
                      float(rng.uniform(0.05, 1.0)), float(rng.uniform(0, 1))),
            kind=str(DEVIATION_KINDS[int(rng.integers(0, len(DEVIATION_KINDS)))])))
    service_set = frozenset(services) | {svc for d in devs for _, svc in d.nodes}
    return StructuralSignature(backbone, devs, service_set)


# ---------------------------------------------------------------------------
# Independent oracles (deliberately separate implementations)


def naive_root_leaf_paths(trace: TraceGraph) -> list[tuple[str, ...]]:
    """Root-to-leaf service paths via an independent child-map walk."""
    children: dict[str, list[str]] = {sid: [] for sid in trace.spans}
    for sp in trace.spans.values():
        if sp.parent_id is not None:
            children[sp.parent_id].append(sp.span_id)
    for kids in children.values():
        kids.sort(key=lambda cid: (trace.spans[cid].start, cid))
    out = []

    def walk(sid, prefix):
        prefix = prefix + [trace.spans[sid].service]
        if not children[sid]:
            out.append(tuple(prefix))
        for cid in children[sid]:
            walk(cid, prefix)

    walk(trace.root_id, [])
    return out


def naive_span_paths(trace: TraceGraph) -> list[list[str]]:
    """Root-to-leaf span-id paths via the same independent walk."""
    children: dict[str, list[str]] = {sid: [] for sid in trace.spans}
    for sp in trace.spans.values():
        if sp.parent_id is not None:
            children[sp.parent_id].append(sp.span_id)
    for kids in children.values():
        kids.sort(key=lambda cid: (trace.spans[cid].start, cid))
    out = []

    def walk(sid, prefix):
        prefix = prefix + [sid]
        if not children[sid]:
            out.append(prefix)
        for cid in children[sid]:
            walk(cid, prefix)

    walk(trace.root_id, [])
    return out


def contains_contig(seq, sub) -> bool:
    m = len(sub)
    return any(tuple(seq[i:i + m]) == tuple(sub) for i in range(len(seq) - m + 1))


def naive_support(segment, traces) -> float:
    """Fraction of traces with the segment contiguous on some root-leaf path."""
    hits = 0
    for trace in traces:
        if any(contains_contig(p, segment) for p in naive_root_leaf_paths(trace)):
            hits += 1
    return hits / len(traces)


def naive_self_latency(trace: TraceGraph, span_id: str) -> int:
    """Point-set self latency: duration minus child coverage, via set scan."""
    sp = trace.spans[span_id]
    covered: set[int] = set()
    for child in trace.spans.values():
        if child.parent_id != span_id:
            continue
        lo = max(child.start, sp.start)
        hi = min(child.start + child.duration, sp.start + sp.duration)
        covered.update(range(lo, hi))
    return max(0, sp.duration - len(covered))


def naive_criticality(segment, traces, alpha: float) -> float:
    """Per-trace hand tally of the latency-share / reach-share blend."""
    seg = tuple(segment)
    m = len(seg)
    lat_total = 0.0
    reach_total = 0.0
    for trace in traces:
        matched: set[str] = set()
        for sp_path in naive_span_paths(trace):
            names = [trace.spans[s].service for s in sp_path]
            for i in range(len(names) - m + 1):
                if tuple(names[i:i + m]) == seg:
                    matched.update(sp_path[i:i + m])
        if not matched:
            continue
        e2e = trace.root.duration
        if e2e > 0:
            lat = sum(naive_self_latency(trace, s) for s in matched)
            lat_total += min(1.0, lat / e2e)
        downstream: set[str] = set()
        frontier = [sp.span_id for sp in trace.spans.values()
                    if sp.parent_id in matched and sp.span_id not in matched]
        while frontier:
            sid = frontier.pop()
            if sid in downstream:
                continue
            downstream.add(sid)
            frontier.extend(sp.span_id for sp in trace.spans.values()
                            if sp.parent_id == sid)
        reach_total += len(downstream - matched) / len(trace.spans)
    n = len(traces)
    return alpha * (lat_total / n) + (1 - alpha) * (reach_total / n)


# ---------------------------------------------------------------------------
# Optimizer fixtures


def random_optimizer_fixture(rng, max_services: int = 4, max_candidates: int = 5):
    """Small random allocation problem with an enumerable search space.

    Returns (spaces, paths, qps, cache, t_e2e); candidate grids mix
    feasible and infeasible targets on purpose.
    """
    n = int(rng.integers(2, max_services + 1))
    services = [f"s{i}" for i in range(n)]
    params = {}
    candidates = {}
    for s in services:
        work = float(rng.uniform(1000, 20000))
        params[s] = ServiceCostParams(work_per_request=work)
        k = int(rng.integers(3, max_candidates + 1))
        lo = work * float(rng.uniform(0.6, 0.9))
        hi = work * float(rng.uniform(2.0, 6.0))
        candidates[s] = [float(x) for x in np.linspace(lo, hi, k)]
    spaces = SloSpace(candidates)
    qps = {s: float(rng.uniform(0.0, 50.0)) for s in services}
    cache = build_cache(AnalyticalCostModel(params),
                        {s: [qps[s]] for s in services}, candidates)
    paths = []
    for _ in range(int(rng.integers(1, 4))):
        size = int(rng.integers(1, n + 1))
        idx = sorted(rng.choice(n, size=size, replace=False))
        paths.append(tuple(services[int(i)] for i in idx))
    total = sum(max(candidates[s]) for s in services)
    t_e2e = float(rng.uniform(0.3, 1.2)) * total
    return spaces, CriticalPathSet(paths), qps, cache, t_e2e

"""Discrete-event cluster simulator and experiment harness.

Generates trace corpora from pattern templates (with probabilistic retry /
fanout / fallback hooks), replays workload scenarios through a per-service
FIFO queueing model, executes allocation plans, and measures latency, SLO
compliance, and CPU efficiency. Serves as the end-to-end oracle for the
rest of the toolkit.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from . import forecast as fc
from .costmodel import (
    AnalyticalCostModel,
    ResourceCache,
    ServiceCostParams,
    build_cache,
    invert_cpu_for_target,
)
from .fingerprint import FingerprintConfig, StructuralSignature, fingerprint
from .optimizer import (
    AllocationPlan,
    CriticalPathSet,
    OptimizerConfig,
    SloSpace,
    critical_paths,
    discretize_slo_space,
    genetic_search,
)
from .similarity import (
    PatternCluster,
    SimilarityConfig,
    SimilarityWeights,
    cluster_signatures,
    dedupe_signatures,
    infer_weights,
    sim_overall,
)
from .trace_model import Span, TraceGraph, iter_service_self_latencies

SCENARIO_NAMES = ("gradual_rise", "high_sustained", "spike_plateau")
STRATEGIES = ("opt1", "opt2", "opt3", "opt4")


class SimulatorError(Exception):
    pass


# ---------------------------------------------------------------------------
# Templates and scenarios


@dataclass
class CallNode:
    service: str
    work_mean_us: float
    work_sigma: float = 0.25  # lognormal shape; 0 => deterministic
    dist: str = "lognormal"  # lognormal | exponential | fixed
    children: list["CallNode"] = field(default_factory=list)


@dataclass
class DeviationHook:
    kind: str  # retry | fanout | fallback
    probability: float
    path: tuple[int, ...]  # child-index path to the node the hook fires under
    service: str  # injected / duplicated service
    width: int = 2
    work_mean_us: float = 20000.0

    def __post_init__(self):
        if not (0 <= self.probability <= 1):
            raise ValueError(f"hook probability out of range: {self.probability}")


@dataclass
class PatternTemplate:
    template_id: str
    root: CallNode
    hooks: list[DeviationHook] = field(default_factory=list)


@dataclass
class WorkloadScenario:
    name: str
    windows: int
    rates: list[float]  # requests per window
    mixes: list[dict[str, float]] = field(default_factory=list)
    hook_scale: list[float] = field(default_factory=list)
    window_length_us: float = 60_000_000.0
    slo_budget_us: float = 1_000_000.0


@dataclass(frozen=True)
class TraceLabel:
    trace_id: str
    template_id: str
    window: int
    fired: tuple[str, ...]


def generate_workload(name: str, base_qps: float, windows: int,
                      seed: int = 0, window_length_us: float = 60_000_000.0,
                      slo_budget_us: float = 1_000_000.0) -> WorkloadScenario:
    """Rate curve and deviation-prevalence schedule for a named scenario."""
    if windows < 2:
        raise SimulatorError("scenarios need at least 2 windows")
    rng = np.random.default_rng(seed)
    frac = np.linspace(0.0, 1.0, windows)
    if name == "gradual_rise":
        rates = [base_qps * (0.2 + 0.8 * f) for f in frac]
        hook_scale = [1.0 - 0.5 * f for f in frac]
    elif name == "high_sustained":
        rates = [base_qps * float(rng.uniform(0.9, 1.0)) for _ in range(windows)]
        hook_scale = [0.9 - 0.3 * f for f in frac]
    elif name == "spike_plateau":
        step_at = max(1, int(0.25 * windows))
        rates = [base_qps * (0.3 if w < step_at else 1.0) for w in range(windows)]
        hook_scale = [1.0 if w < step_at else 0.1 for w in range(windows)]
    else:
        raise SimulatorError(f"unknown scenario {name!r}")
    return WorkloadScenario(name=name, windows=windows, rates=rates,
                            hook_scale=hook_scale,
                            window_length_us=window_length_us,
                            slo_budget_us=slo_budget_us)


# ---------------------------------------------------------------------------
# Trace instantiation


@dataclass
class SimNode:
    """One instantiated span: pre-drawn work plus child subtrees."""
    service: str
    work_us: float
    error: bool = False
    parallel: bool = False  # children dispatched concurrently
    children: list["SimNode"] = field(default_factory=list)

    def total_duration(self) -> float:
        """Zero-queueing duration: own work plus child phase."""
        if not self.children:
            return self.work_us
        if self.parallel:
            child = max(c.total_duration() for c in self.children)
        else:
            child = sum(c.total_duration() for c in self.children)
        return self.work_us + child

    def span_count(self) -> int:
        return 1 + sum(c.span_count() for c in self.children)

    def critical_path_work(self) -> float:
        if not self.children:
            return self.work_us
        return self.work_us + max(c.critical_path_work() for c in self.children)


def _draw_work(node_mean: float, sigma: float, dist: str, rng) -> float:
    if dist == "fixed" or sigma == 0:
        return node_mean
    if dist == "exponential":
        return float(rng.exponential(node_mean))
    mu = math.log(node_mean) - sigma * sigma / 2.0
    return float(rng.lognormal(mu, sigma))


def instantiate(template: PatternTemplate, rng, hook_scale: float = 1.0,
                ) -> tuple[SimNode, tuple[str, ...]]:
    """Draw one request instance; returns (call tree, fired hook kinds)."""
    fired: list[str] = []
    active = {h.path: h for h in template.hooks
              if rng.random() < h.probability * hook_scale}

    def build(node: CallNode, path: tuple[int, ...]) -> SimNode:
        inst = SimNode(
            service=node.service,
            work_us=_draw_work(node.work_mean_us, node.work_sigma, node.dist, rng),
        )
        for i, child in enumerate(node.children):
            inst.children.append(build(child, path + (i,)))
        hook = active.get(path)
        if hook is not None:
            fired.append(hook.kind)
            _apply_hook(inst, hook, rng)
        return inst

    return build(template.root, ()), tuple(sorted(set(fired)))


def _apply_hook(inst: SimNode, hook: DeviationHook, rng) -> None:
    if hook.kind == "retry":
        # Failed attempt of the retried service before the successful one.
        target = next((c for c in inst.children if c.service == hook.service), None)
        attempt = SimNode(service=hook.service, error=True,
                          work_us=_draw_work(hook.work_mean_us, 0.25, "lognormal", rng))
        if target is not None:
            idx = inst.children.index(target)
            inst.children.insert(idx, attempt)
        else:
            ok = SimNode(service=hook.service,
                         work_us=_draw_work(hook.work_mean_us, 0.25, "lognormal", rng))
            inst.children.extend([attempt, ok])
    elif hook.kind == "fanout":
        group = SimNode(service=hook.service, work_us=2000.0, parallel=True)
        for i in range(hook.width):
            group.children.append(SimNode(
                service=f"{hook.service}-shard{i}",
                work_us=_draw_work(hook.work_mean_us, 0.25, "lognormal", rng)))
        inst.children.append(group)
    elif hook.kind == "fallback":
        failed = SimNode(service=hook.service, error=True,
                         work_us=_draw_work(hook.work_mean_us / 4, 0.25, "lognormal", rng))
        alt = SimNode(service=f"{hook.service}-fallback",
                      work_us=_draw_work(hook.work_mean_us, 0.25, "lognormal", rng))
        inst.children.extend([failed, alt])
    else:
        raise SimulatorError(f"unknown hook kind {hook.kind!r}")


def instance_to_trace(inst: SimNode, trace_id: str, start_us: float,
                      root_operation: str = "call") -> TraceGraph:
    """Trace graph of an instance under zero queueing.

    The root span carries the entry endpoint as its operation, mirroring
    how edge services tag traces in production tracing systems.
    """
    spans: list[Span] = []
    counter = [0]

    def emit(node: SimNode, start: float, parent: Optional[str]) -> float:
        sid = f"{trace_id}-{counter[0]}"
        counter[0] += 1
        t = start + node.work_us
        if node.parallel and node.children:
            end = t + max(c.total_duration() for c in node.children)
            for c in node.children:
                emit(c, t, sid)
        else:
            for c in node.children:
                t = emit(c, t, sid)
            end = t
        spans.append(Span(
            span_id=sid, parent_id=parent, service=node.service,
            operation="call" if parent is not None else root_operation,
            start=int(round(start)),
            duration=int(round(end - start)), error=node.error))
        return end

    emit(inst, start_us, None)
    return TraceGraph(trace_id, spans)


def window_request_counts(scenario: WorkloadScenario, window: int) -> dict[str, int]:
    """Deterministic per-template request counts for a window."""
    rate = scenario.rates[window]
    mix = scenario.mixes[window]
    return {tid: int(round(rate * share)) for tid, share in sorted(mix.items())}


def generate_traces(templates: Sequence[PatternTemplate], scenario: WorkloadScenario,
                    seed: int = 0,
                    ) -> tuple[list[TraceGraph], list[TraceLabel], list[list[tuple[float, SimNode]]]]:
    """Instantiate the whole scenario.

    Returns (traces, labels, per-window arrival lists); traces reflect
    zero-queueing timing, arrivals carry the same instances for execution.
    """
    if not templates:
        raise SimulatorError("no templates")
    if len(scenario.mixes) != scenario.windows:
        raise SimulatorError("scenario is missing per-window pattern mixes")
    by_id = {t.template_id: t for t in templates}
    rng = np.random.default_rng(seed)
    traces: list[TraceGraph] = []
    labels: list[TraceLabel] = []
    arrivals: list[list[tuple[float, SimNode]]] = []
    serial = 0
    for w in range(scenario.windows):
        counts = window_request_counts(scenario, w)
        scale = scenario.hook_scale[w] if scenario.hook_scale else 1.0
        window_arrivals: list[tuple[float, SimNode]] = []
        total = sum(counts.values())
        window_start = w * scenario.window_length_us
        # Uniform jittered arrival offsets across the window.
        offsets = np.sort(rng.uniform(0, scenario.window_length_us, size=total))
        k = 0
        for tid in sorted(counts):
            for _ in range(counts[tid]):
                inst, fired = instantiate(by_id[tid], rng, scale)
                at = float(offsets[k])
                k += 1
                trace_id = f"t{serial}"
                serial += 1
                traces.append(instance_to_trace(inst, trace_id, window_start + at,
                                                root_operation=tid))
                labels.append(TraceLabel(trace_id, tid, w, fired))
                window_arrivals.append((at, inst))
        window_arrivals.sort(key=lambda x: x[0])
        arrivals.append(window_arrivals)
    return traces, labels, arrivals


# ---------------------------------------------------------------------------
# Queueing engine


@dataclass
class WindowMetrics:
    injected: int
    completed: int
    latencies_us: list[float]
    compliance: float
    utilization: dict[str, float]
    cores: dict[str, float]
    starved: list[str] = field(default_factory=list)

    @property
    def incomplete(self) -> int:
        return self.injected - self.completed


class _ServicePool:
    __slots__ = ("cores", "servers", "speed", "queue", "busy", "busy_time", "last")

    def __init__(self, cores: float):
        self.cores = cores
        self.servers = max(1, int(round(cores))) if cores > 0 else 0
        self.speed = (cores / self.servers) if self.servers else 0.0
        self.queue: list = []
        self.busy = 0
        self.busy_time = 0.0


def simulate_window(cores: Mapping[str, float],
                    arrivals: Sequence[tuple[float, SimNode]],
                    window_length_us: float, budget_us: float) -> WindowMetrics:
    """Execute one window of requests through FIFO multi-server queues.

    Servers are held only during a span's self-work; children run after it,
    sequentially unless the span is a parallel fan-out. Requests still
    in-system when the event horizon empties (starved services) count as
    incomplete and non-compliant.
    """
    services = {s for _, inst in arrivals for s in _services_of(inst)}
    pools = {s: _ServicePool(float(cores.get(s, 0.0))) for s in services}
    heap: list[tuple[float, int, object]] = []
    seq = [0]

    def push(t: float, fn) -> None:
        heapq.heappush(heap, (t, seq[0], fn))
        seq[0] += 1

    latencies: list[float] = []

    def run_span(node: SimNode, t: float, done) -> None:
        pool = pools[node.service]
        start = t

        def begin(ts: float) -> None:
            pool.busy += 1
            dur = node.work_us / pool.speed if pool.speed > 0 else float("inf")
            push(ts + dur, lambda te: finish_work(te))

        def finish_work(te: float) -> None:
            pool.busy -= 1
            pool.busy_time += node.work_us / pool.speed if pool.speed > 0 else 0.0
            if pool.queue:
                nxt = pool.queue.pop(0)
                nxt(te)
            dispatch_children(te)

        def dispatch_children(te: float) -> None:
            if not node.children:
                done(te)
                return
            if node.parallel:
                remaining = [len(node.children)]
                latest = [te]

                def child_done(tc: float) -> None:
                    remaining[0] -= 1
                    latest[0] = max(latest[0], tc)
                    if remaining[0] == 0:
                        done(latest[0])

                for c in node.children:
                    run_span(c, te, child_done)
            else:
                chain = list(node.children)

                def next_child(tc: float) -> None:
                    if not chain:
                        done(tc)
                        return
                    c = chain.pop(0)
                    run_span(c, tc, next_child)

                next_child(te)

        if pool.servers == 0:
            return  # starved: never starts, request stays incomplete
        if pool.busy < pool.servers:
            begin(start)
        else:
            pool.queue.append(begin)

    completed = [0]
    for at, inst in arrivals:
        def make_root(inst=inst, at=at):
            def root_done(te: float) -> None:
                completed[0] += 1
                latencies.append(te - at)
            return lambda t: run_span(inst, t, root_done)
        push(at, make_root())

    while heap:
        t, _, fn = heapq.heappop(heap)
        fn(t)

    injected = len(arrivals)
    compliant = sum(1 for lat in latencies if lat <= budget_us)
    compliance = compliant / injected if injected else 1.0
    utilization = {
        s: (p.busy_time / (p.cores * window_length_us) if p.cores > 0 else 0.0)
        for s, p in pools.items()
    }
    starved = sorted(s for s, p in pools.items() if p.servers == 0 and injected)
    return WindowMetrics(
        injected=injected, completed=completed[0], latencies_us=latencies,
        compliance=compliance, utilization=utilization,
        cores={s: p.cores for s, p in pools.items()}, starved=starved)


def _services_of(inst: SimNode):
    yield inst.service
    for c in inst.children:
        yield from _services_of(c)


# ---------------------------------------------------------------------------
# Experiment harness


@dataclass
class ExperimentConfig:
    fingerprint: FingerprintConfig = field(default_factory=FingerprintConfig)
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    min_samples: int = 4
    slo_step_count: int = 20
    budget_fraction: float = 0.5  # optimizer budget as a share of the SLO budget
    seasonal_period: int = 7
    load_level_count: int = 12
    core_granularity: float = 0.1
    # Replica sizing guard rails, applied identically to every strategy:
    # keep effective per-server speed high enough that a request's own
    # service time stays below its latency target, and absorb forecast
    # error with a small load margin.
    service_time_margin: float = 1.25
    qps_margin: float = 1.15


@dataclass
class PatternState:
    """Clustered patterns of one fingerprinting window."""
    clusters: list[PatternCluster]
    profiles: dict[int, fc.PatternProfile]
    representatives: dict[int, StructuralSignature]
    weights: SimilarityWeights


@dataclass
class StrategyRun:
    windows: list[WindowMetrics]
    plans: list[dict[str, float]]
    total_core_windows: float
    total_completed: int
    total_injected: int
    compliance: float
    qps_per_cpu: float


@dataclass
class SimulationReport:
    scenario: str
    strategy: str
    seeds: list[int]
    runs: list[StrategyRun]

    @property
    def mean_qps_per_cpu(self) -> float:
        return float(np.mean([r.qps_per_cpu for r in self.runs]))

    @property
    def mean_compliance(self) -> float:
        return float(np.mean([r.compliance for r in self.runs]))

    @property
    def mean_total_cpu(self) -> float:
        return float(np.mean([r.total_core_windows for r in self.runs]))


def signatures_for(traces: Sequence[TraceGraph],
                   config: FingerprintConfig) -> list[StructuralSignature]:
    """Per-trace structural signatures (singleton-collection fingerprints)."""
    return [fingerprint([t], config) for t in traces]


def group_by_endpoint(traces: Sequence[TraceGraph],
                      ) -> dict[tuple[str, str], list[TraceGraph]]:
    """Group traces by entry endpoint (root service + operation)."""
    groups: dict[tuple[str, str], list[TraceGraph]] = {}
    for t in traces:
        key = (t.root.service, t.root.operation)
        groups.setdefault(key, []).append(t)
    return groups


@dataclass
class EndpointSignature:
    """Collection fingerprint of one endpoint's traces in one window."""
    endpoint: tuple[str, str]
    count: int
    signature: StructuralSignature


def endpoint_signatures(traces: Sequence[TraceGraph], config: FingerprintConfig,
                        ) -> list[EndpointSignature]:
    """One collection-level fingerprint per entry endpoint.

    Fingerprinting whole collections keeps rare structures below the
    support threshold, so they surface as deviations with execution
    probabilities instead of splintering the backbone.
    """
    groups = group_by_endpoint(traces)
    return [EndpointSignature(key, len(groups[key]),
                              fingerprint(groups[key], config))
            for key in sorted(groups)]


def build_patterns(traces: Sequence[TraceGraph], cfg: ExperimentConfig,
                   ) -> PatternState:
    """Fingerprint endpoint collections and cluster them into patterns."""
    groups = group_by_endpoint(traces)
    keys = sorted(groups)
    sigs = [fingerprint(groups[k], cfg.fingerprint) for k in keys]
    group_counts = [len(groups[k]) for k in keys]
    unique, _, inverse = dedupe_signatures(sigs)
    weight_per_unique = [0.0] * len(unique)
    for gi, u in enumerate(inverse):
        weight_per_unique[u] += group_counts[gi]
    weights = (infer_weights(unique, cfg.similarity) if len(unique) >= 2
               else SimilarityWeights(0.45, 0.45, 0.1))
    clusters, noise, labels = cluster_signatures(
        unique, cfg.similarity, min_samples=min(cfg.min_samples,
                                                max(1, min(group_counts))),
        weights=weights, sample_weight=weight_per_unique)
    if not clusters:
        clusters = [PatternCluster(i, unique[i], [i],
                                   weight_per_unique[i] / sum(weight_per_unique))
                    for i in range(len(unique))]
    profiles: dict[int, fc.PatternProfile] = {}
    reps: dict[int, StructuralSignature] = {}
    for cluster in clusters:
        member_set = set(cluster.members)
        assigned: list[TraceGraph] = []
        for gi, u in enumerate(inverse):
            if u in member_set:
                assigned.extend(groups[keys[gi]])
        profiles[cluster.cluster_id] = fc.pattern_profile(cluster.cluster_id,
                                                          assigned)
        reps[cluster.cluster_id] = cluster.representative
    return PatternState(clusters, profiles, reps, weights)


def assign_to_patterns(sigs: Sequence[StructuralSignature], state: PatternState,
                       cfg: ExperimentConfig) -> list[int]:
    """Nearest-representative pattern id for each signature."""
    unique, _, inverse = dedupe_signatures(sigs)
    pattern_ids = sorted(state.representatives)
    best_for_unique = []
    for sig in unique:
        scores = [(sim_overall(sig, state.representatives[pid], state.weights,
                               cfg.similarity), -pid) for pid in pattern_ids]
        best = max(scores)
        best_for_unique.append(-best[1])
    return [best_for_unique[u] for u in inverse]


def _window_feat(index: int, windows_per_cycle: int) -> fc.ExogenousFeatures:
    """Hour-of-day feature aligned to the scenario's window cycle.

    Day-of-week is held fixed so the exogenous fit never extrapolates to
    an unobserved calendar category.
    """
    hour = int((index % windows_per_cycle) * (24 / windows_per_cycle)) % 24
    return fc.ExogenousFeatures(hour_of_day=hour, day_of_week=0)


def _forecast_pattern_rates(history: Mapping[int, Sequence[float]],
                            period: int, cycle: int) -> dict[int, float]:
    """One-step forecasts from per-pattern count histories."""
    out: dict[int, float] = {}
    for pid, series in history.items():
        series = list(series)
        feats = [_window_feat(i, cycle) for i in range(len(series))]
        try:
            model = fc.fit_rate_model(series, feats, seasonal_period=period)
            out[pid] = fc.forecast_rate(model, _window_feat(len(series), cycle))
        except fc.ForecastError:
            out[pid] = float(np.mean(series)) if series else 0.0
    return out


_MIN_HEADROOM = 1.1  # relative latency headroom below which sizing diverges


def _feasible_candidates(spaces: SloSpace, params: Mapping[str, ServiceCostParams],
                         service: str) -> list[float]:
    """Candidate targets the cost model can satisfy with sane headroom."""
    work = params[service].work_per_request
    cands = [c for c in spaces.candidates[service] if c > work * _MIN_HEADROOM]
    return cands or [work * 1.25]


def _independent_plan(spaces: SloSpace, paths: CriticalPathSet,
                      params: Mapping[str, ServiceCostParams],
                      budget_us: float) -> dict[str, float]:
    """Per-service uniform-budget-share target selection (no coordination)."""
    max_len = max((len(p) for p in paths.paths), default=1)
    share = budget_us / max_len
    plan: dict[str, float] = {}
    for service in spaces.candidates:
        cands = _feasible_candidates(spaces, params, service)
        within = [c for c in cands if c <= share]
        plan[service] = max(within) if within else min(cands)
    return plan


def _size_cores(p: ServiceCostParams, qps: float, tau: float,
                cfg: ExperimentConfig) -> float:
    """Replica sizing for one service: model prediction plus guard rails.

    The floor keeps one request's service time below its target even at
    negligible (or mispredicted-zero) load, where the throughput model
    alone would allocate nothing and starve stragglers.
    """
    predicted = invert_cpu_for_target(p, qps * cfg.qps_margin, tau,
                                      cfg.core_granularity)
    floor = cfg.service_time_margin * p.work_per_request / tau
    floor = math.ceil(floor / cfg.core_granularity - 1e-9) * cfg.core_granularity
    return max(predicted, floor)


def _sanitize_assignment(assignment: Mapping[str, float], spaces: SloSpace,
                         params: Mapping[str, ServiceCostParams]) -> dict[str, float]:
    """Lift any infeasible targets to the smallest feasible candidate."""
    out = {}
    for service, tau in assignment.items():
        cands = _feasible_candidates(spaces, params, service)
        threshold = params[service].work_per_request * _MIN_HEADROOM
        out[service] = tau if tau > threshold else min(cands)
    return out


@dataclass
class _SeedBundle:
    """Everything derivable from (templates, scenario, seed) alone."""
    by_window: dict[int, list[TraceGraph]]
    arrivals: list[list[tuple[float, SimNode]]]
    sigs_by_window: dict[int, list[EndpointSignature]]
    spaces: SloSpace
    cache: ResourceCache
    states: dict[int, PatternState] = field(default_factory=dict)

    def state_for(self, window: int, cfg: ExperimentConfig) -> PatternState:
        if window not in self.states:
            self.states[window] = build_patterns(self.by_window[window], cfg)
        return self.states[window]


_BUNDLES: dict[tuple, _SeedBundle] = {}


def _scenario_key(scenario: WorkloadScenario) -> tuple:
    return (scenario.name, scenario.windows, tuple(scenario.rates),
            tuple(tuple(sorted(m.items())) for m in scenario.mixes),
            tuple(scenario.hook_scale), scenario.window_length_us)


def _prepare(templates, scenario, params, cfg: ExperimentConfig,
             seed: int) -> _SeedBundle:
    key = (_scenario_key(scenario), tuple(t.template_id for t in templates),
           repr(cfg.fingerprint), repr(cfg.similarity), cfg.min_samples,
           cfg.slo_step_count, cfg.load_level_count, seed)
    if key in _BUNDLES:
        return _BUNDLES[key]
    traces, labels, arrivals = generate_traces(templates, scenario, seed=seed)
    by_window: dict[int, list[TraceGraph]] = {}
    trace_index = {t.trace_id: t for t in traces}
    for label in labels:
        by_window.setdefault(label.window, []).append(trace_index[label.trace_id])
    sigs_by_window = {w: endpoint_signatures(ts, cfg.fingerprint)
                      for w, ts in by_window.items()}
    samples: dict[str, list[float]] = {}
    for svc, lat in iter_service_self_latencies(traces):
        samples.setdefault(svc, []).append(float(lat))
    spaces = discretize_slo_space(samples, cfg.slo_step_count)
    window_s = scenario.window_length_us / 1e6
    peak_qps = max(max(scenario.rates) / window_s * 2.0, 1.0)
    model = AnalyticalCostModel(params)
    # Geometric levels resolve low-traffic services that a linear grid
    # would snap to zero load (making every target look equally cheap).
    levels = [0.0] + [float(x) for x in np.geomspace(
        peak_qps / 100.0, peak_qps, cfg.load_level_count - 1)]
    load_levels = {svc: levels for svc in spaces.candidates}
    cache = build_cache(model, load_levels, spaces.candidates)
    bundle = _SeedBundle(by_window, arrivals, sigs_by_window, spaces, cache)
    _BUNDLES[key] = bundle
    return bundle


def run_experiment(templates: Sequence[PatternTemplate], scenario: WorkloadScenario,
                   params: Mapping[str, ServiceCostParams], strategy: str,
                   cfg: ExperimentConfig, seeds: Sequence[int]) -> SimulationReport:
    """Run one strategy over a scenario for several seeds.

    opt1: per-window fingerprints + global GA;  opt2: per-window
    fingerprints + independent selection;  opt3: frozen fingerprints +
    global GA;  opt4: frozen fingerprints + independent selection.
    """
    if strategy not in STRATEGIES:
        raise SimulatorError(f"unknown strategy {strategy!r}")
    dynamic = strategy in ("opt1", "opt2")
    global_opt = strategy in ("opt1", "opt3")
    runs = []
    for seed in seeds:
        runs.append(_run_once(templates, scenario, params, dynamic, global_opt,
                              cfg, seed))
    return SimulationReport(scenario.name, strategy, list(seeds), runs)


def _run_once(templates, scenario, params, dynamic: bool, global_opt: bool,
              cfg: ExperimentConfig, seed: int) -> StrategyRun:
    bundle = _prepare(templates, scenario, params, cfg, seed)
    spaces, cache = bundle.spaces, bundle.cache
    window_s = scenario.window_length_us / 1e6
    budget_opt = scenario.slo_budget_us * cfg.budget_fraction
    opt_cfg = replace(cfg.optimizer, t_e2e=budget_opt)

    warm: Optional[dict[str, float]] = None
    window_metrics: list[WindowMetrics] = []
    plans: list[dict[str, float]] = []
    for w in range(scenario.windows):
        # Frozen strategies keep the bootstrap fingerprints; dynamic ones
        # refresh from the freshest completed window.
        state = bundle.state_for(w - 1 if dynamic and w > 0 else 0, cfg)
        history = _pattern_history(scenario, bundle.sigs_by_window, state,
                                   cfg, upto=w)
        rates = _forecast_pattern_rates(history, cfg.seasonal_period,
                                        scenario.windows)
        qps = {
            svc: fc.propagate_qps(rates, state.profiles, svc) / window_s
            for svc in spaces.candidates
        }
        paths = critical_paths(list(state.representatives.values()),
                               cfg.optimizer.impact_threshold)
        if global_opt:
            plan = genetic_search(spaces, paths, qps, cache,
                                  replace(opt_cfg, seed=seed * 1000 + w),
                                  warm_start=warm)
            assignment = _sanitize_assignment(plan.assignment, spaces, params)
            warm = plan.assignment
        else:
            assignment = _independent_plan(spaces, paths, params, budget_opt)
        cores = {
            svc: _size_cores(params[svc], qps.get(svc, 0.0), assignment[svc],
                             cfg)
            for svc in assignment
        }
        metrics = simulate_window(cores, bundle.arrivals[w],
                                  scenario.window_length_us,
                                  scenario.slo_budget_us)
        metrics.cores = cores
        window_metrics.append(metrics)
        plans.append(dict(assignment))

    total_cores = sum(sum(m.cores.values()) for m in window_metrics)
    total_completed = sum(m.completed for m in window_metrics)
    total_injected = sum(m.injected for m in window_metrics)
    compliant = sum(
        sum(1 for lat in m.latencies_us if lat <= scenario.slo_budget_us)
        for m in window_metrics)
    return StrategyRun(
        windows=window_metrics,
        plans=plans,
        total_core_windows=total_cores,
        total_completed=total_completed,
        total_injected=total_injected,
        compliance=compliant / total_injected if total_injected else 1.0,
        qps_per_cpu=total_completed / total_cores if total_cores else 0.0,
    )


def _pattern_history(scenario: WorkloadScenario, sigs_by_window,
                     state: PatternState, cfg: ExperimentConfig,
                     upto: int) -> dict[int, list[float]]:
    """Per-pattern request counts: cycle-aligned prehistory + observed windows.

    Prehistory repeats the scenario's rate shape (scaled by window-0
    pattern shares) for a whole number of cycles, so every observed
    window index stays phase-aligned with its prehistory counterpart.
    """
    pattern_ids = sorted(state.representatives)

    def window_counts(w: int) -> dict[int, float]:
        entries = sigs_by_window[w]
        assigned = assign_to_patterns([e.signature for e in entries], state, cfg)
        counts = {pid: 0.0 for pid in pattern_ids}
        for entry, pid in zip(entries, assigned):
            counts[pid] += entry.count
        return counts

    counts0 = window_counts(0)
    shape = scenario.rates
    base = shape[0] if shape[0] > 0 else 1.0
    cycles = math.ceil(2 * cfg.seasonal_period / len(shape))
    pre_len = cycles * len(shape)
    history: dict[int, list[float]] = {pid: [] for pid in pattern_ids}
    for i in range(pre_len):
        scale = shape[i % len(shape)] / base
        for pid in pattern_ids:
            history[pid].append(counts0[pid] * scale)
    for w in range(upto):
        counts = window_counts(w)
        for pid in pattern_ids:
            history[pid].append(counts[pid])
    return history


# ---------------------------------------------------------------------------
# Reference topology for experiments and the CLI


def default_templates() -> list[PatternTemplate]:
    """Small heterogeneous service topology with all three hook kinds.

    Templates are call chains, so every request's latency is governed by
    one critical path; branching enters only through deviation hooks.
    """
    browse = PatternTemplate(
        template_id="browse",
        root=CallNode("frontend", 30000, children=[
            CallNode("search", 70000, children=[
                CallNode("catalog", 50000),
            ]),
        ]),
        hooks=[DeviationHook("fanout", 0.45, (0,), "index", width=2,
                             work_mean_us=50000)],
    )
    purchase = PatternTemplate(
        template_id="purchase",
        root=CallNode("frontend", 30000, children=[
            CallNode("auth", 40000, children=[
                CallNode("checkout", 80000, children=[
                    CallNode("payment", 100000, children=[
                        CallNode("inventory", 50000),
                    ]),
                ]),
            ]),
        ]),
        hooks=[DeviationHook("retry", 0.45, (0, 0), "payment",
                             work_mean_us=80000)],
    )
    detail = PatternTemplate(
        template_id="detail",
        root=CallNode("frontend", 30000, children=[
            CallNode("catalog", 50000, children=[
                CallNode("pricing", 60000),
            ]),
        ]),
        hooks=[DeviationHook("fallback", 0.4, (0,), "pricing",
                             work_mean_us=60000)],
    )
    return [browse, purchase, detail]


def default_cost_params(templates: Sequence[PatternTemplate]) -> dict[str, ServiceCostParams]:
    """Cost-model parameters matching the templates' work distributions."""
    works: dict[str, float] = {}

    def walk(node: CallNode):
        works[node.service] = max(works.get(node.service, 0.0), node.work_mean_us)
        for c in node.children:
            walk(c)

    for t in templates:
        walk(t.root)
        for h in t.hooks:
            if h.kind == "fanout":
                # The dispatch node does trivial coordination work only.
                works[h.service] = 1000.0
                for i in range(h.width):
                    works[f"{h.service}-shard{i}"] = h.work_mean_us
            else:
                works.setdefault(h.service, h.work_mean_us)
            if h.kind == "fallback":
                works[f"{h.service}-fallback"] = h.work_mean_us
    return {svc: ServiceCostParams(work_per_request=w) for svc, w in works.items()}


def default_mixes(scenario: WorkloadScenario) -> list[dict[str, float]]:
    """Constant template mix; structural drift comes from the hook schedule."""
    return [{"browse": 0.4, "purchase": 0.35, "detail": 0.25}
            for _ in range(scenario.windows)]

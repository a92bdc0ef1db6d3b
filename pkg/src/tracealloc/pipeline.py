"""Batch pipeline: configuration, stage functions, and artifact plumbing.

Stages run in a fixed order (ingest, fingerprint, cluster, forecast,
cache, optimize, simulate, report), each reading the previous stage's
files and writing its own, so any intermediate can be inspected or the
pipeline resumed mid-way. All randomness flows from one root seed, split
per stage.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np
import yaml

from . import forecast as fc
from . import simulator as sim
from .costmodel import (
    AnalyticalCostModel,
    CostWeights,
    ServiceCostParams,
    build_cache,
    export_cache,
    import_cache,
)
from .fingerprint import (
    FingerprintConfig,
    StructuralSignature,
    signature_from_dict,
    signature_to_dict,
)
from .optimizer import (
    OptimizerConfig,
    critical_paths,
    discretize_slo_space,
    genetic_search,
)
from .similarity import SimilarityConfig
from .trace_model import TraceGraph, emit_traces, iter_service_self_latencies, parse_traces

STAGES = ("ingest", "fingerprint", "cluster", "forecast", "cache",
          "optimize", "simulate", "report")


class ConfigError(Exception):
    """Invalid pipeline configuration; message lists field-level problems."""


class StageError(Exception):
    """A pipeline stage failed; prior artifacts are left in place."""


@dataclass
class SimulatorSettings:
    scenario: str = "gradual_rise"
    base_rate: float = 300.0  # requests per window at peak
    windows: int = 6
    window_length_s: float = 10.0
    slo_budget_s: float = 1.0
    strategies: list[str] = field(default_factory=lambda: list(sim.STRATEGIES))
    seeds: list[int] = field(default_factory=lambda: [0, 1])


@dataclass
class PipelineConfig:
    seed: int = 0
    out_dir: str = "out"
    input_traces: Optional[str] = None  # external JSONL; None => synthesize
    window_length_s: float = 300.0  # fingerprinting window
    fingerprint: FingerprintConfig = field(default_factory=FingerprintConfig)
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    min_samples: int = 4
    seasonal_period: int = 7
    cost_weights: CostWeights = field(default_factory=CostWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    budget_fraction: float = 0.5
    slo_step_count: int = 20
    load_level_count: int = 12
    simulator: SimulatorSettings = field(default_factory=SimulatorSettings)


def _build_section(name: str, cls, values: Mapping[str, Any], errors: list[str]):
    known = getattr(cls, "__dataclass_fields__", {})
    unknown = set(values) - set(known)
    for key in sorted(unknown):
        errors.append(f"{name}.{key}: unknown field")
    kwargs = {k: v for k, v in values.items() if k in known}
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        errors.append(f"{name}: {exc}")
        return cls()


def load_config(path: str | Path) -> PipelineConfig:
    """Parse and validate a YAML pipeline config.

    Raises ConfigError whose message names every offending field.
    """
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    return config_from_dict(doc)


def config_from_dict(doc: Mapping[str, Any]) -> PipelineConfig:
    errors: list[str] = []
    cfg = PipelineConfig()
    top_known = {"seed", "out", "input", "window_length_s", "fingerprint",
                 "similarity", "min_samples", "seasonal_period", "cost",
                 "optimizer", "budget_fraction", "slo_step_count",
                 "load_level_count", "simulator"}
    for key in sorted(set(doc) - top_known):
        errors.append(f"{key}: unknown field")

    if "seed" in doc:
        if not isinstance(doc["seed"], int) or doc["seed"] < 0:
            errors.append(f"seed: must be a non-negative integer, got {doc['seed']!r}")
        else:
            cfg.seed = doc["seed"]
    cfg.out_dir = str(doc.get("out", cfg.out_dir))
    if doc.get("input") is not None:
        cfg.input_traces = str(doc["input"])
    if "window_length_s" in doc:
        try:
            wl = float(doc["window_length_s"])
            if wl <= 0:
                raise ValueError("must be > 0")
            cfg.window_length_s = wl
        except (TypeError, ValueError) as exc:
            errors.append(f"window_length_s: {exc}")
    cfg.fingerprint = _build_section("fingerprint", FingerprintConfig,
                                     doc.get("fingerprint", {}), errors)
    cfg.similarity = _build_section("similarity", SimilarityConfig,
                                    doc.get("similarity", {}), errors)
    cfg.cost_weights = _build_section("cost", CostWeights,
                                      doc.get("cost", {}), errors)
    opt_doc = dict(doc.get("optimizer", {}))
    if "budget_fraction" in opt_doc:
        bf = opt_doc.pop("budget_fraction")
        if not (0 < float(bf) <= 1):
            errors.append(f"optimizer.budget_fraction: must be in (0, 1], got {bf}")
        else:
            cfg.budget_fraction = float(bf)
    cfg.optimizer = _build_section("optimizer", OptimizerConfig, opt_doc, errors)
    sim_doc = dict(doc.get("simulator", {}))
    cfg.simulator = _build_section("simulator", SimulatorSettings, sim_doc, errors)
    if cfg.simulator.scenario not in sim.SCENARIO_NAMES:
        errors.append(
            f"simulator.scenario: must be one of {sorted(sim.SCENARIO_NAMES)}, "
            f"got {cfg.simulator.scenario!r}")
    for s in cfg.simulator.strategies:
        if s not in sim.STRATEGIES:
            errors.append(f"simulator.strategies: unknown strategy {s!r}")
    if cfg.simulator.windows < 2:
        errors.append(f"simulator.windows: must be >= 2, got {cfg.simulator.windows}")
    for scalar in ("min_samples", "seasonal_period", "slo_step_count",
                   "load_level_count"):
        if scalar in doc:
            v = doc[scalar]
            if not isinstance(v, int) or v < 1:
                errors.append(f"{scalar}: must be a positive integer, got {v!r}")
            else:
                setattr(cfg, scalar, v)
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    return cfg


def stage_seed(root_seed: int, stage: str) -> int:
    """Deterministic per-stage child seed from the root seed."""
    return int(np.random.SeedSequence([root_seed, STAGES.index(stage)])
               .generate_state(1)[0])


# ---------------------------------------------------------------------------
# Artifact helpers


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    if not path.exists():
        raise StageError(f"missing artifact: {path}")
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, list(reader)


def _fmt(x: float) -> str:
    return repr(float(x))


def _scenario_for(cfg: PipelineConfig) -> sim.WorkloadScenario:
    s = cfg.simulator
    scenario = sim.generate_workload(
        s.scenario, s.base_rate, s.windows, seed=stage_seed(cfg.seed, "ingest"),
        window_length_us=s.window_length_s * 1e6,
        slo_budget_us=s.slo_budget_s * 1e6)
    scenario.mixes = sim.default_mixes(scenario)
    return scenario


def _experiment_config(cfg: PipelineConfig) -> sim.ExperimentConfig:
    return sim.ExperimentConfig(
        fingerprint=cfg.fingerprint,
        similarity=cfg.similarity,
        optimizer=replace(cfg.optimizer, cost_weights=cfg.cost_weights),
        min_samples=cfg.min_samples,
        slo_step_count=cfg.slo_step_count,
        budget_fraction=cfg.budget_fraction,
        seasonal_period=cfg.seasonal_period,
        load_level_count=cfg.load_level_count,
    )


def _load_traces(out: Path) -> list[TraceGraph]:
    path = out / "traces.jsonl"
    if not path.exists():
        raise StageError(f"missing artifact: {path}")
    with open(path) as fh:
        result = parse_traces(fh)
    if not result.traces:
        raise StageError(f"no usable traces in {path}")
    return result.traces


def _window_of(trace: TraceGraph, window_length_us: float) -> int:
    return int(trace.root.start // window_length_us)


# ---------------------------------------------------------------------------
# Stages


def run_ingest(cfg: PipelineConfig, out: Path) -> None:
    """Materialize the trace corpus: copy-parse external input or synthesize."""
    if cfg.input_traces is not None:
        src = Path(cfg.input_traces)
        if not src.exists():
            raise StageError(f"input trace file not found: {src}")
        with open(src) as fh:
            result = parse_traces(fh)
        if not result.traces:
            raise StageError(f"no usable traces in {src}")
        with open(out / "traces.jsonl", "w") as fh:
            emit_traces(result.traces, fh)
        _write_csv(out / "ingest_issues.csv", ("line", "problem"),
                   [(i.line, i.problem) for i in result.issues])
        return
    templates = sim.default_templates()
    scenario = _scenario_for(cfg)
    traces, labels, _ = sim.generate_traces(
        templates, scenario, seed=stage_seed(cfg.seed, "ingest"))
    with open(out / "traces.jsonl", "w") as fh:
        emit_traces(traces, fh)
    _write_csv(out / "labels.csv", ("trace_id", "template_id", "window", "fired"),
               [(l.trace_id, l.template_id, l.window, "|".join(l.fired))
                for l in labels])


def run_fingerprint(cfg: PipelineConfig, out: Path) -> None:
    """Collection fingerprints per (window, entry endpoint)."""
    traces = _load_traces(out)
    window_us = cfg.simulator.window_length_s * 1e6
    grouped: dict[tuple[int, tuple[str, str]], list[TraceGraph]] = {}
    for trace in traces:
        w = _window_of(trace, window_us)
        key = (w, (trace.root.service, trace.root.operation))
        grouped.setdefault(key, []).append(trace)
    with open(out / "signatures.jsonl", "w") as fh:
        for (w, endpoint) in sorted(grouped):
            group = grouped[(w, endpoint)]
            sig = sim.fingerprint(group, cfg.fingerprint)
            doc = {"window": w,
                   "endpoint": list(endpoint),
                   "trace_ids": sorted(t.trace_id for t in group),
                   "signature": signature_to_dict(sig, cfg.fingerprint)}
            fh.write(json.dumps(doc, sort_keys=True) + "\n")


def _load_group_signatures(out: Path):
    path = out / "signatures.jsonl"
    if not path.exists():
        raise StageError(f"missing artifact: {path}")
    groups = []
    with open(path) as fh:
        for line in fh:
            doc = json.loads(line)
            groups.append((doc["window"], tuple(doc["endpoint"]),
                           doc["trace_ids"],
                           signature_from_dict(doc["signature"])))
    if not groups:
        raise StageError(f"no signatures in {path}")
    return groups


def run_cluster(cfg: PipelineConfig, out: Path) -> None:
    """Dedupe and density-cluster group signatures into patterns."""
    from .similarity import (
        PatternCluster,
        SimilarityWeights,
        cluster_signatures,
        dedupe_signatures,
        infer_weights,
    )

    groups = _load_group_signatures(out)
    sigs = [g[3] for g in groups]
    group_counts = [len(g[2]) for g in groups]
    unique, _, inverse = dedupe_signatures(sigs)
    weight_per_unique = [0.0] * len(unique)
    for gi, u in enumerate(inverse):
        weight_per_unique[u] += group_counts[gi]
    weights = (infer_weights(unique, cfg.similarity) if len(unique) >= 2
               else SimilarityWeights(0.45, 0.45, 0.1))
    clusters, noise, labels = cluster_signatures(
        unique, cfg.similarity,
        min_samples=min(cfg.min_samples, max(1, min(group_counts))),
        weights=weights, sample_weight=weight_per_unique)
    if not clusters:
        total = sum(weight_per_unique)
        clusters = [PatternCluster(i, unique[i], [i],
                                   weight_per_unique[i] / total)
                    for i in range(len(unique))]
        noise = []
    unique_to_cluster = {}
    for c in clusters:
        for m in c.members:
            unique_to_cluster[m] = c.cluster_id
    assignment_rows = []
    for (w, endpoint, trace_ids, _), u in zip(groups, inverse):
        cid = unique_to_cluster.get(u, -1)
        for tid in trace_ids:
            assignment_rows.append((tid, cid))
    _write_csv(out / "assignments.csv", ("trace_id", "cluster"),
               sorted(assignment_rows))
    doc = {
        "weights": {"backbone": weights.w_b, "subgraph": weights.w_s,
                    "composition": weights.w_c},
        "noise_unique_indices": noise,
        "clusters": [
            {"cluster_id": c.cluster_id,
             "trace_share": c.trace_share,
             "members": c.members,
             "representative": signature_to_dict(c.representative)}
            for c in clusters
        ],
    }
    with open(out / "clusters.json", "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _cluster_artifacts(out: Path):
    path = out / "clusters.json"
    if not path.exists():
        raise StageError(f"missing artifact: {path}")
    with open(path) as fh:
        doc = json.load(fh)
    reps = {c["cluster_id"]: signature_from_dict(c["representative"])
            for c in doc["clusters"]}
    shares = {c["cluster_id"]: c["trace_share"] for c in doc["clusters"]}
    _, rows = _read_csv(out / "assignments.csv")
    assignments = {tid: int(cid) for tid, cid in rows}
    return reps, shares, assignments


def run_forecast(cfg: PipelineConfig, out: Path) -> None:
    """Observed per-pattern rates, one-step forecasts, per-service QPS."""
    traces = _load_traces(out)
    reps, _, assignments = _cluster_artifacts(out)
    window_us = cfg.simulator.window_length_s * 1e6
    trace_index = {t.trace_id: t for t in traces}
    by_pattern_window: dict[int, dict[int, int]] = {pid: {} for pid in reps}
    pattern_traces: dict[int, list[TraceGraph]] = {pid: [] for pid in reps}
    max_window = 0
    for tid, pid in assignments.items():
        if pid not in reps or tid not in trace_index:
            continue
        trace = trace_index[tid]
        w = _window_of(trace, window_us)
        max_window = max(max_window, w)
        by_pattern_window[pid][w] = by_pattern_window[pid].get(w, 0) + 1
        pattern_traces[pid].append(trace)
    windows = max_window + 1

    rate_rows = []
    for pid in sorted(reps):
        for w in range(windows):
            rate_rows.append((int(w * window_us), pid,
                              by_pattern_window[pid].get(w, 0)))
    _write_csv(out / "rates.csv", ("window_start", "pattern_id", "count"),
               sorted(rate_rows))

    # One-step forecasts: the observed shape is tiled into a phase-aligned
    # prehistory so early windows also have enough history to fit.
    forecast_rows = []
    qps_by_window: dict[int, dict[str, float]] = {}
    profiles = {pid: fc.pattern_profile(pid, pattern_traces[pid])
                for pid in sorted(reps) if pattern_traces[pid]}
    cycles = math.ceil(2 * cfg.seasonal_period / windows)
    for w in range(windows):
        rates = {}
        for pid in sorted(profiles):
            observed = [by_pattern_window[pid].get(i, 0) for i in range(windows)]
            series = observed * cycles + observed[:w]
            feats = [sim._window_feat(i, windows) for i in range(len(series))]
            try:
                model = fc.fit_rate_model(series, feats,
                                          seasonal_period=cfg.seasonal_period)
                rates[pid] = fc.forecast_rate(
                    model, sim._window_feat(len(series), windows))
            except fc.ForecastError:
                rates[pid] = float(np.mean(series)) if series else 0.0
            forecast_rows.append((w, pid, _fmt(rates[pid])))
        qps_by_window[w] = {
            svc: q / cfg.simulator.window_length_s
            for svc, q in fc.propagate_all(rates, profiles).items()
        }
    _write_csv(out / "forecasts.csv", ("window", "pattern_id", "rate"),
               forecast_rows)
    qps_rows = [(w, svc, _fmt(q))
                for w in sorted(qps_by_window)
                for svc, q in sorted(qps_by_window[w].items())]
    _write_csv(out / "qps.csv", ("window", "service", "qps"), qps_rows)


def _slo_spaces(cfg: PipelineConfig, traces: Sequence[TraceGraph]):
    samples: dict[str, list[float]] = {}
    for svc, lat in iter_service_self_latencies(traces):
        samples.setdefault(svc, []).append(float(lat))
    return discretize_slo_space(samples, cfg.slo_step_count)


def run_cache(cfg: PipelineConfig, out: Path) -> None:
    """Precompute the (service, load, target) resource lookup table."""
    traces = _load_traces(out)
    spaces = _slo_spaces(cfg, traces)
    header, rows = _read_csv(out / "qps.csv")
    peak = max((float(q) for _, _, q in rows), default=1.0)
    params = sim.default_cost_params(sim.default_templates())
    missing = sorted(set(spaces.candidates) - set(params))
    for svc in missing:
        # External corpora may name services the reference params do not
        # cover; derive a nominal work time from observed latencies.
        lows = spaces.candidates[svc][0]
        params[svc] = ServiceCostParams(work_per_request=max(1.0, lows * 0.8))
    model = AnalyticalCostModel(params)
    top = max(peak * 2.0, 1.0)
    levels = [0.0] + [float(x) for x in np.geomspace(
        top / 100.0, top, cfg.load_level_count - 1)]
    load_levels = {svc: levels for svc in spaces.candidates}
    cache = build_cache(model, load_levels, spaces.candidates)
    with open(out / "cache.csv", "w", newline="") as fh:
        export_cache(cache, fh)


def run_optimize(cfg: PipelineConfig, out: Path) -> None:
    """Per-window GA target selection against the cached cost surface."""
    traces = _load_traces(out)
    reps, _, _ = _cluster_artifacts(out)
    spaces = _slo_spaces(cfg, traces)
    with open(out / "cache.csv") as fh:
        cache = import_cache(fh)
    _, qps_rows = _read_csv(out / "qps.csv")
    qps_by_window: dict[int, dict[str, float]] = {}
    for w, svc, q in qps_rows:
        qps_by_window.setdefault(int(w), {})[svc] = float(q)

    budget = cfg.simulator.slo_budget_s * 1e6 * cfg.budget_fraction
    opt_cfg = replace(cfg.optimizer, t_e2e=budget,
                      cost_weights=cfg.cost_weights)
    paths = critical_paths(list(reps.values()), cfg.optimizer.impact_threshold)
    plan_rows = []
    summary_rows = []
    warm = None
    seed0 = stage_seed(cfg.seed, "optimize")
    for w in sorted(qps_by_window):
        qps = qps_by_window[w]
        plan = genetic_search(spaces, paths, qps, cache,
                              replace(opt_cfg, seed=seed0 + w),
                              warm_start=warm)
        warm = plan.assignment
        window_cost = plan.total_cost if plan.total_cost > 0 else 1.0
        for svc in sorted(plan.assignment):
            tau = plan.assignment[svc]
            snapped = cache.snap_load(svc, qps.get(svc, 0.0))
            entry = cache.lookup(svc, snapped, tau)
            if entry.feasible:
                cpu, mem = entry.prediction.cpu, entry.prediction.mem
                share = ((cfg.cost_weights.alpha_cost * cpu
                          + cfg.cost_weights.beta_cost * mem
                          / cfg.cost_weights.mem_unit_bytes) / window_cost)
            else:
                cpu = mem = share = float("nan")
            plan_rows.append((w, svc, _fmt(tau), _fmt(cpu), _fmt(mem),
                              _fmt(share)))
        summary_rows.append((w, _fmt(plan.total_cost), _fmt(plan.violation),
                             int(plan.feasible), plan.generations))
    _write_csv(out / "plan.csv",
               ("window", "service", "tau_us", "cached_cpu", "cached_mem",
                "cost_share"), plan_rows)
    _write_csv(out / "plan_summary.csv",
               ("window", "total_cost", "violation", "feasible", "generations"),
               summary_rows)


def run_simulate(cfg: PipelineConfig, out: Path) -> None:
    """Execute every configured strategy through the cluster simulator."""
    templates = sim.default_templates()
    scenario = _scenario_for(cfg)
    params = sim.default_cost_params(templates)
    exp_cfg = _experiment_config(cfg)
    rows = []
    lat_rows = []
    for strategy in cfg.simulator.strategies:
        report = sim.run_experiment(templates, scenario, params, strategy,
                                    exp_cfg, cfg.simulator.seeds)
        for seed, run in zip(report.seeds, report.runs):
            for w, m in enumerate(run.windows):
                rows.append((scenario.name, strategy, seed, w, m.injected,
                             m.completed, _fmt(m.compliance),
                             _fmt(sum(m.cores.values()))))
                lats = sorted(m.latencies_us)
                if lats:
                    p50, p95, p99 = (lats[int(q * (len(lats) - 1))]
                                     for q in (0.5, 0.95, 0.99))
                else:
                    p50 = p95 = p99 = float("nan")
                lat_rows.append((scenario.name, strategy, seed, w,
                                 _fmt(p50), _fmt(p95), _fmt(p99)))
            rows.append((scenario.name, strategy, seed, "total",
                         run.total_injected, run.total_completed,
                         _fmt(run.compliance), _fmt(run.total_core_windows)))
    _write_csv(out / "simulation.csv",
               ("scenario", "strategy", "seed", "window", "injected",
                "completed", "compliance", "cores"), rows)
    _write_csv(out / "latencies.csv",
               ("scenario", "strategy", "seed", "window", "p50_us", "p95_us",
                "p99_us"), lat_rows)


def run_report(cfg: PipelineConfig, out: Path) -> None:
    """Summary tables and figures from the pipeline artifacts."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cluster_path = out / "clusters.json"
    if not cluster_path.exists():
        raise StageError(f"missing artifact: {cluster_path}")
    with open(cluster_path) as fh:
        clusters = json.load(fh)["clusters"]
    shares = sorted((c["trace_share"] for c in clusters), reverse=True)
    coverage_rows = []
    running = 0.0
    for i, share in enumerate(shares, start=1):
        running += share
        coverage_rows.append((i, _fmt(share), _fmt(running)))
    _write_csv(out / "coverage.csv", ("rank", "share", "cumulative"),
               coverage_rows)

    header, rows = _read_csv(out / "simulation.csv")
    totals = [r for r in rows if r[3] == "total"]
    by_key: dict[tuple[str, str], list[list[str]]] = {}
    for r in totals:
        by_key.setdefault((r[0], r[1]), []).append(r)
    summary_rows = []
    for (scenario, strategy) in sorted(by_key):
        group = by_key[(scenario, strategy)]
        compliance = float(np.mean([float(r[6]) for r in group]))
        cores = float(np.mean([float(r[7]) for r in group]))
        completed = float(np.mean([float(r[5]) for r in group]))
        qpc = completed / cores if cores else 0.0
        summary_rows.append((scenario, strategy, _fmt(compliance),
                             _fmt(cores), _fmt(qpc)))
    _write_csv(out / "strategy_summary.csv",
               ("scenario", "strategy", "mean_compliance", "mean_total_cores",
                "qps_per_cpu"), summary_rows)
    matrix_rows = [(r[0], r[1], r[4]) for r in summary_rows]
    _write_csv(out / "efficiency_matrix.csv",
               ("scenario", "strategy", "qps_per_cpu"), matrix_rows)

    # Figures alongside the delimited output.
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([r[0] for r in coverage_rows],
            [float(r[2]) for r in coverage_rows], marker="o")
    ax.set_xlabel("pattern rank")
    ax.set_ylabel("cumulative trace share")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(out / "coverage.png", metadata={"Software": None})
    plt.close(fig)

    strategies = sorted({r[1] for r in summary_rows})
    scenarios = sorted({r[0] for r in summary_rows})
    lookup = {(r[0], r[1]): (float(r[2]), float(r[4])) for r in summary_rows}
    x = np.arange(len(scenarios))
    width = 0.8 / max(1, len(strategies))
    for fname, idx, ylabel in (("compliance.png", 0, "mean SLO compliance"),
                               ("efficiency.png", 1, "QPS per CPU")):
        fig, ax = plt.subplots(figsize=(5.5, 3.5))
        for si, strategy in enumerate(strategies):
            vals = [lookup.get((sc, strategy), (float("nan"), float("nan")))[idx]
                    for sc in scenarios]
            ax.bar(x + si * width, vals, width, label=strategy)
        ax.set_xticks(x + width * (len(strategies) - 1) / 2)
        ax.set_xticklabels(scenarios, fontsize=8)
        ax.set_ylabel(ylabel)
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out / fname, metadata={"Software": None})
        plt.close(fig)


_STAGE_FUNCS = {
    "ingest": run_ingest,
    "fingerprint": run_fingerprint,
    "cluster": run_cluster,
    "forecast": run_forecast,
    "cache": run_cache,
    "optimize": run_optimize,
    "simulate": run_simulate,
    "report": run_report,
}


def run_stage(name: str, cfg: PipelineConfig, out: Path) -> None:
    if name not in _STAGE_FUNCS:
        raise ConfigError(f"unknown stage {name!r}; expected one of {list(STAGES)}")
    out.mkdir(parents=True, exist_ok=True)
    _STAGE_FUNCS[name](cfg, out)


def run_pipeline(cfg: PipelineConfig, out: Path,
                 start: str = "ingest") -> list[str]:
    """Run stages in order, starting at `start`; returns executed stage names."""
    if start not in STAGES:
        raise ConfigError(f"unknown stage {start!r}; expected one of {list(STAGES)}")
    executed = []
    for name in STAGES[STAGES.index(start):]:
        run_stage(name, cfg, out)
        executed.append(name)
    return executed

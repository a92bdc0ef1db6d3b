"""Resource prediction and cost: (service, load, latency target) -> cpu/mem.

The reference analytical model trades latency headroom for parallelism;
a grid-interpolation model fitted from observations exposes the same
contract, so a learned predictor can be slotted in later. Predictions for
the optimizer are precomputed into an immutable lookup cache.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import IO, Mapping, Optional, Protocol, Sequence

import numpy as np

MIB = 1024 * 1024


class CostModelError(Exception):
    pass


class InfeasibleTargetError(CostModelError):
    """The latency target does not exceed the pure service time."""


@dataclass(frozen=True)
class CostWeights:
    alpha_cost: float = 1.0
    beta_cost: float = 0.001
    mem_unit_bytes: float = MIB

    def __post_init__(self):
        if self.alpha_cost < 0 or self.beta_cost < 0:
            raise ValueError("cost weights must be non-negative")
        if self.alpha_cost == 0 and self.beta_cost == 0:
            raise ValueError("cost weights must not both be zero")


@dataclass(frozen=True)
class ResourcePrediction:
    cpu: float  # cores
    mem: float  # bytes

    def __post_init__(self):
        if self.cpu < 0 or self.mem < 0:
            raise ValueError("resource predictions must be non-negative")


@dataclass(frozen=True)
class ServiceCostParams:
    work_per_request: float  # CPU-time per request, microseconds
    mem_base: float = 64 * MIB
    mem_per_qps: float = MIB

    def __post_init__(self):
        if self.work_per_request <= 0:
            raise ValueError("work_per_request must be positive")


def predict_resources(params: ServiceCostParams, q: float, tau: float) -> ResourcePrediction:
    """Analytical sizing: latency headroom (tau - work) buys lower parallelism.

    cpu = q * work * (1 + work / (tau - work)) in cores, with work in
    seconds; strictly decreasing in tau and increasing in q.
    """
    if q < 0:
        raise CostModelError(f"negative load {q}")
    if tau <= params.work_per_request:
        raise InfeasibleTargetError(
            f"target {tau}us does not exceed service time {params.work_per_request}us")
    work_us = params.work_per_request
    cpu = q * (work_us / 1e6) * (1.0 + work_us / (tau - work_us))
    mem = params.mem_base + params.mem_per_qps * q
    return ResourcePrediction(cpu=cpu, mem=mem)


def cost(prediction: ResourcePrediction, weights: CostWeights) -> float:
    """Weighted cpu + memory cost, memory scaled to the configured unit."""
    return (weights.alpha_cost * prediction.cpu
            + weights.beta_cost * prediction.mem / weights.mem_unit_bytes)


class ResourceModel(Protocol):
    def predict(self, service: str, q: float, tau: float) -> ResourcePrediction: ...


@dataclass
class AnalyticalCostModel:
    params: Mapping[str, ServiceCostParams]

    def predict(self, service: str, q: float, tau: float) -> ResourcePrediction:
        if service not in self.params:
            raise CostModelError(f"unknown service {service!r}")
        return predict_resources(self.params[service], q, tau)


class TableCostModel:
    """Bilinear grid interpolation over (q, tau) observation grids.

    Queries outside the sample hull are clamped to the nearest edge.
    """

    def __init__(self, grids: Mapping[str, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]):
        # service -> (q_levels, tau_levels, cpu_grid, mem_grid)
        self._grids = dict(grids)

    def predict(self, service: str, q: float, tau: float) -> ResourcePrediction:
        if service not in self._grids:
            raise CostModelError(f"unknown service {service!r}")
        qs, taus, cpu, mem = self._grids[service]
        qq = float(np.clip(q, qs[0], qs[-1]))
        tt = float(np.clip(tau, taus[0], taus[-1]))
        i = int(np.clip(np.searchsorted(qs, qq, side="right") - 1, 0, len(qs) - 2))
        j = int(np.clip(np.searchsorted(taus, tt, side="right") - 1, 0, len(taus) - 2))
        fq = (qq - qs[i]) / (qs[i + 1] - qs[i])
        ft = (tt - taus[j]) / (taus[j + 1] - taus[j])

        def interp(g: np.ndarray) -> float:
            return float(
                g[i, j] * (1 - fq) * (1 - ft)
                + g[i + 1, j] * fq * (1 - ft)
                + g[i, j + 1] * (1 - fq) * ft
                + g[i + 1, j + 1] * fq * ft)

        return ResourcePrediction(cpu=interp(cpu), mem=interp(mem))


def fit_table_model(samples: Mapping[str, Sequence[tuple[float, float, float, float]]]
                    ) -> TableCostModel:
    """Build a grid-interpolation model from (q, tau, cpu, mem) observations.

    Samples per service must form a complete grid over at least 2 load
    levels and 2 targets.
    """
    grids = {}
    for service, obs in samples.items():
        qs = np.array(sorted({q for q, _, _, _ in obs}))
        taus = np.array(sorted({t for _, t, _, _ in obs}))
        if len(qs) < 2 or len(taus) < 2:
            raise CostModelError(
                f"degenerate sample span for {service!r}: need >= 2 loads and >= 2 targets")
        if len(obs) != len(qs) * len(taus):
            raise CostModelError(f"samples for {service!r} do not form a complete grid")
        cpu = np.full((len(qs), len(taus)), np.nan)
        mem = np.full((len(qs), len(taus)), np.nan)
        qi = {v: i for i, v in enumerate(qs)}
        ti = {v: i for i, v in enumerate(taus)}
        for q, t, c, m in obs:
            cpu[qi[q], ti[t]] = c
            mem[qi[q], ti[t]] = m
        if np.isnan(cpu).any():
            raise CostModelError(f"samples for {service!r} do not form a complete grid")
        grids[service] = (qs, taus, cpu, mem)
    return TableCostModel(grids)


# ---------------------------------------------------------------------------
# Lookup cache


@dataclass(frozen=True)
class CacheEntry:
    prediction: Optional[ResourcePrediction]

    @property
    def feasible(self) -> bool:
        return self.prediction is not None


@dataclass
class ResourceCache:
    entries: dict[tuple[str, float, float], CacheEntry] = field(default_factory=dict)
    load_levels: dict[str, list[float]] = field(default_factory=dict)
    slo_levels: dict[str, list[float]] = field(default_factory=dict)

    def lookup(self, service: str, q: float, tau: float) -> CacheEntry:
        key = (service, q, tau)
        if key not in self.entries:
            raise KeyError(f"no cache entry for {key}")
        return self.entries[key]

    def snap_load(self, service: str, q: float) -> float:
        """Nearest cached load level; ties break toward the smaller level."""
        levels = self.load_levels.get(service)
        if not levels:
            raise KeyError(f"no cached load levels for {service!r}")
        return min(levels, key=lambda lv: (abs(lv - q), lv))

    def __len__(self) -> int:
        return len(self.entries)


def build_cache(model: ResourceModel, load_levels: Mapping[str, Sequence[float]],
                slo_spaces: Mapping[str, Sequence[float]]) -> ResourceCache:
    """One entry per (service, load, target); infeasible cells get markers."""
    cache = ResourceCache()
    for service in sorted(load_levels):
        taus = slo_spaces.get(service)
        if not taus:
            raise CostModelError(f"empty SLO space for {service!r}")
        cache.load_levels[service] = sorted(float(q) for q in load_levels[service])
        cache.slo_levels[service] = sorted(float(t) for t in taus)
        for q in cache.load_levels[service]:
            for tau in cache.slo_levels[service]:
                try:
                    entry = CacheEntry(model.predict(service, q, tau))
                except InfeasibleTargetError:
                    entry = CacheEntry(None)
                cache.entries[(service, q, tau)] = entry
    return cache


CACHE_FIELDS = ("service", "qps", "tau_us", "cpu_cores", "mem_bytes", "feasible")


def export_cache(cache: ResourceCache, stream: IO[str]) -> None:
    writer = csv.writer(stream)
    writer.writerow(CACHE_FIELDS)
    for (service, q, tau) in sorted(cache.entries):
        entry = cache.entries[(service, q, tau)]
        if entry.feasible:
            writer.writerow([service, repr(float(q)), repr(float(tau)),
                             repr(float(entry.prediction.cpu)),
                             repr(float(entry.prediction.mem)), 1])
        else:
            writer.writerow([service, repr(float(q)), repr(float(tau)), "", "", 0])


def import_cache(stream: IO[str]) -> ResourceCache:
    reader = csv.reader(stream)
    header = next(reader)
    if tuple(header) != CACHE_FIELDS:
        raise CostModelError(f"unexpected cache header: {header}")
    cache = ResourceCache()
    for row in reader:
        service, q, tau, cpu, mem, feasible = row
        q, tau = float(q), float(tau)
        entry = CacheEntry(ResourcePrediction(float(cpu), float(mem))) \
            if feasible == "1" else CacheEntry(None)
        cache.entries[(service, q, tau)] = entry
        cache.load_levels.setdefault(service, [])
        cache.slo_levels.setdefault(service, [])
        if q not in cache.load_levels[service]:
            cache.load_levels[service].append(q)
        if tau not in cache.slo_levels[service]:
            cache.slo_levels[service].append(tau)
    for service in cache.load_levels:
        cache.load_levels[service].sort()
        cache.slo_levels[service].sort()
    return cache


def invert_cpu_for_target(params: ServiceCostParams, q: float, tau: float,
                          granularity: float = 0.1) -> float:
    """Cores needed for a (load, target) point, rounded up to the granularity."""
    pred = predict_resources(params, q, tau)
    if pred.cpu == 0:
        return 0.0
    return math.ceil(pred.cpu / granularity - 1e-9) * granularity

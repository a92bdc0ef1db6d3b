"""Per-window self-latency target allocation via penalized genetic search.

Candidate targets come from empirical latency percentiles, constraints
from critical paths (backbones plus high-impact deviations), and costs
from the precomputed resource cache. Fitness = total cost + lambda *
path-budget violation.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .costmodel import CostWeights, ResourceCache, cost as resource_cost
from .fingerprint import StructuralSignature

INFEASIBLE_COST = 1e15


class OptimizerError(Exception):
    pass


@dataclass
class SloSpace:
    candidates: dict[str, list[float]]
    step: dict[str, float] = field(default_factory=dict)

    def services(self) -> list[str]:
        return sorted(self.candidates)


@dataclass
class CriticalPathSet:
    paths: list[tuple[str, ...]]
    provenance: list[str] = field(default_factory=list)

    def services(self) -> set[str]:
        return {s for p in self.paths for s in p}


@dataclass(frozen=True)
class OptimizerConfig:
    t_e2e: float = 1_000_000.0  # microseconds
    lambda_penalty: float = 100.0
    population: int = 50
    max_generations: int = 70
    stagnation_limit: int = 10
    tournament_size: int = 3
    crossover_prob: float = 0.7
    mutation_prob_per_gene: float = 0.1
    elite_count: int = 1
    seed: int = 0
    impact_threshold: float = 0.5
    cost_weights: CostWeights = CostWeights()

    def __post_init__(self):
        for p in (self.crossover_prob, self.mutation_prob_per_gene):
            if not (0 <= p <= 1):
                raise ValueError(f"probability out of range: {p}")
        if self.population < 2:
            raise ValueError("population must be >= 2")


@dataclass
class AllocationPlan:
    assignment: dict[str, float]
    total_cost: float
    violation: float
    feasible: bool
    generations: int = 0


def discretize_slo_space(samples: Mapping[str, Sequence[float]],
                         step_count: int = 20) -> SloSpace:
    """P1..P99 arithmetic grid of candidate targets per service."""
    candidates: dict[str, list[float]] = {}
    steps: dict[str, float] = {}
    for service in sorted(samples):
        vals = np.asarray(samples[service], dtype=float)
        if vals.size == 0:
            raise OptimizerError(f"no self-latency samples for {service!r}")
        lo = float(np.percentile(vals, 1))
        hi = float(np.percentile(vals, 99))
        if hi <= lo:
            candidates[service] = [lo]
            steps[service] = 0.0
        else:
            step = (hi - lo) / step_count
            candidates[service] = [lo + i * step for i in range(step_count + 1)]
            steps[service] = step
    return SloSpace(candidates, steps)


def _deviation_chain(dev) -> list[str]:
    """Service sequence along a longest path through a deviation subgraph."""
    nodes = list(dev.nodes)
    if not nodes:
        return []
    succ: dict[int, list[int]] = {i: [] for i in range(len(nodes))}
    for a, b in dev.edges:
        succ[a].append(b)
    memo: dict[int, list[int]] = {}

    def longest(i: int) -> list[int]:
        if i in memo:
            return memo[i]
        best: list[int] = []
        for j in succ[i]:
            tail = longest(j)
            if len(tail) > len(best):
                best = tail
        memo[i] = [i] + best
        return memo[i]

    paths = [longest(i) for i in range(len(nodes))]
    chain = max(paths, key=len)
    return [nodes[i][1] for i in chain]


def critical_paths(signatures: Sequence[StructuralSignature],
                   impact_threshold: float = 0.5) -> CriticalPathSet:
    """Backbone root-to-leaf paths plus high-impact deviation extensions."""
    if not signatures:
        raise OptimizerError("critical paths need at least one signature")
    seen: set[tuple[str, ...]] = set()
    paths: list[tuple[str, ...]] = []
    provenance: list[str] = []
    for sig in signatures:
        for p in sig.backbone.paths():
            if p not in seen:
                seen.add(p)
                paths.append(p)
                provenance.append("backbone")
        for dev in sig.deviations:
            impact = dev.p_exec * dev.node_count
            if dev.p_exec <= 0 or impact < impact_threshold:
                continue
            prefix = sig.backbone.path_to(dev.divergence)
            chain = tuple(_deviation_chain(dev))
            tail = (sig.backbone.services[dev.merge],) if dev.merge is not None else ()
            p = prefix + chain + tail
            if p not in seen:
                seen.add(p)
                paths.append(p)
                provenance.append(f"deviation:{dev.kind}")
    return CriticalPathSet(paths, provenance)


def violation(assignment: Mapping[str, float], paths: CriticalPathSet,
              t_e2e: float) -> float:
    """Total path-wise budget excess of an assignment."""
    total = 0.0
    for p in paths.paths:
        s = 0.0
        for svc in p:
            if svc not in assignment:
                raise OptimizerError(f"assignment missing service {svc!r}")
            s += assignment[svc]
        total += max(0.0, s - t_e2e)
    return total


def fitness(assignment: Mapping[str, float], qps: Mapping[str, float],
            cache: ResourceCache, paths: CriticalPathSet,
            config: OptimizerConfig) -> float:
    """Cost plus lambda-weighted violation; infeasible cells cost +inf surrogate."""
    total = 0.0
    for service, tau in assignment.items():
        q = cache.snap_load(service, qps.get(service, 0.0))
        entry = cache.lookup(service, q, tau)
        if not entry.feasible:
            total += INFEASIBLE_COST
        else:
            total += resource_cost(entry.prediction, config.cost_weights)
    return total + config.lambda_penalty * violation(assignment, paths, config.t_e2e)


# ---------------------------------------------------------------------------
# Genetic search


class _FitnessTable:
    """Vectorized fitness over chromosome index matrices."""

    def __init__(self, spaces: SloSpace, paths: CriticalPathSet,
                 qps: Mapping[str, float], cache: ResourceCache,
                 config: OptimizerConfig):
        self.services = spaces.services()
        self.config = config
        self.sizes = np.array([len(spaces.candidates[s]) for s in self.services])
        width = int(self.sizes.max())
        n = len(self.services)
        self.tau = np.zeros((n, width))
        self.costs = np.zeros((n, width))
        for i, s in enumerate(self.services):
            cands = spaces.candidates[s]
            q = cache.snap_load(s, qps.get(s, 0.0))
            for j, tau in enumerate(cands):
                self.tau[i, j] = tau
                entry = cache.lookup(s, q, tau)
                self.costs[i, j] = (resource_cost(entry.prediction, config.cost_weights)
                                    if entry.feasible else INFEASIBLE_COST)
            for j in range(len(cands), width):
                self.tau[i, j] = cands[-1]
                self.costs[i, j] = INFEASIBLE_COST
        idx = {s: i for i, s in enumerate(self.services)}
        self.path_counts = np.zeros((len(paths.paths), n))
        for r, p in enumerate(paths.paths):
            for svc in p:
                if svc in idx:
                    self.path_counts[r, idx[svc]] += 1

    def evaluate(self, pop: np.ndarray) -> np.ndarray:
        rows = np.arange(pop.shape[1])
        costs = self.costs[rows, pop].sum(axis=1)
        taus = self.tau[rows, pop]
        if len(self.path_counts):
            excess = taus @ self.path_counts.T - self.config.t_e2e
            v = np.clip(excess, 0.0, None).sum(axis=1)
        else:
            v = np.zeros(pop.shape[0])
        return costs + self.config.lambda_penalty * v


def genetic_search(spaces: SloSpace, paths: CriticalPathSet,
                   qps: Mapping[str, float], cache: ResourceCache,
                   config: OptimizerConfig,
                   warm_start: Optional[Mapping[str, float]] = None) -> AllocationPlan:
    """Tournament/two-point-crossover GA over target indices, with elitism.

    Deterministic given the seed; returns the best individual ever seen.
    """
    if not spaces.candidates:
        raise OptimizerError("empty SLO space")
    table = _FitnessTable(spaces, paths, qps, cache, config)
    services = table.services
    sizes = table.sizes
    n = len(services)
    rng = np.random.default_rng(config.seed)

    if np.all(sizes == 1):
        pop = np.zeros((1, n), dtype=int)
        fit = table.evaluate(pop)
        return _finish(pop[0], fit[0], table, spaces, paths, qps, cache, config, 1)

    pop = rng.integers(0, sizes, size=(config.population, n))
    if warm_start is not None:
        pop[0] = _encode(warm_start, spaces, services)
    fit = table.evaluate(pop)

    best_idx = int(np.argmin(fit))
    best = pop[best_idx].copy()
    best_fit = float(fit[best_idx])
    stagnant = 0
    generations = 0
    for gen in range(config.max_generations):
        generations = gen + 1
        # Tournament selection.
        contenders = rng.integers(0, config.population,
                                  size=(config.population, config.tournament_size))
        winners = contenders[np.arange(config.population),
                             np.argmin(fit[contenders], axis=1)]
        parents = pop[winners]
        # Two-point crossover on consecutive pairs (one-point when n < 3).
        children = parents.copy()
        for i in range(0, config.population - 1, 2):
            if rng.random() >= config.crossover_prob:
                continue
            a, b = children[i].copy(), children[i + 1].copy()
            if n < 2:
                continue
            if n < 3:
                cut = int(rng.integers(1, n))
                a[cut:], b[cut:] = b[cut:].copy(), a[cut:].copy()
            else:
                c1, c2 = sorted(rng.choice(np.arange(1, n), size=2, replace=False))
                a[c1:c2], b[c1:c2] = b[c1:c2].copy(), a[c1:c2].copy()
            children[i], children[i + 1] = a, b
        # Per-gene mutation: resample from the service's candidate set.
        mask = rng.random(children.shape) < config.mutation_prob_per_gene
        resampled = rng.integers(0, sizes, size=children.shape)
        children = np.where(mask, resampled, children)
        # Elitism: keep the best-ever individual.
        children[0] = best
        pop = children
        fit = table.evaluate(pop)
        gen_best = int(np.argmin(fit))
        if fit[gen_best] < best_fit - 1e-12:
            best_fit = float(fit[gen_best])
            best = pop[gen_best].copy()
            stagnant = 0
        else:
            stagnant += 1
            if stagnant >= config.stagnation_limit:
                break
    best, best_fit = _polish(best, best_fit, table, sizes)
    return _finish(best, best_fit, table, spaces, paths, qps, cache, config, generations)


def _polish(best: np.ndarray, best_fit: float, table: "_FitnessTable",
            sizes: np.ndarray, max_depth: int = 3,
            cell_cap: int = 1024) -> tuple[np.ndarray, float]:
    """Variable-depth local descent around the incumbent.

    Re-optimizes every coordinate subset up to max_depth jointly, restarting
    at depth 1 after each improvement. Joint moves matter because the path
    penalty couples services: a better point may require loosening one target
    while tightening others, which no single-gene move reaches. Subsets whose
    subgrid exceeds cell_cap are skipped to bound the work. Each neighbour
    batch contains the incumbent itself, so batch minima never exceed the
    running best.
    """
    n = len(sizes)
    improved = True
    while improved:
        improved = False
        for depth in range(1, min(n, max_depth) + 1):
            for combo in itertools.combinations(range(n), depth):
                cells = math.prod(int(sizes[i]) for i in combo)
                if cells < 2 or cells > cell_cap:
                    continue
                grid = np.array(list(itertools.product(
                    *(range(sizes[i]) for i in combo))))
                neigh = np.repeat(best[None, :], len(grid), axis=0)
                for col, i in enumerate(combo):
                    neigh[:, i] = grid[:, col]
                fit = table.evaluate(neigh)
                j = int(np.argmin(fit))
                if fit[j] < best_fit - 1e-12:
                    best_fit = float(fit[j])
                    best = neigh[j].copy()
                    improved = True
            if improved:
                break
    return best, best_fit


def _encode(assignment: Mapping[str, float], spaces: SloSpace,
            services: Sequence[str]) -> np.ndarray:
    idx = np.zeros(len(services), dtype=int)
    for i, s in enumerate(services):
        cands = spaces.candidates[s]
        tau = assignment.get(s)
        if tau is None:
            idx[i] = len(cands) - 1
        else:
            idx[i] = int(np.argmin([abs(c - tau) for c in cands]))
    return idx


def _finish(best: np.ndarray, best_fit: float, table: _FitnessTable,
            spaces: SloSpace, paths: CriticalPathSet, qps: Mapping[str, float],
            cache: ResourceCache, config: OptimizerConfig,
            generations: int) -> AllocationPlan:
    assignment = {s: spaces.candidates[s][int(best[i])]
                  for i, s in enumerate(table.services)}
    v = violation(assignment, paths, config.t_e2e)
    cells_ok = all(
        cache.lookup(s, cache.snap_load(s, qps.get(s, 0.0)), tau).feasible
        for s, tau in assignment.items())
    total_cost = best_fit - config.lambda_penalty * v if cells_ok else float("inf")
    return AllocationPlan(
        assignment=assignment,
        total_cost=total_cost,
        violation=v,
        feasible=cells_ok and v == 0.0,
        generations=generations,
    )


@dataclass
class WindowInput:
    """Per-window optimization inputs, assembled by the pipeline driver."""
    qps: dict[str, float]
    signatures: list[StructuralSignature]


def optimize_horizon(windows: Sequence[WindowInput], spaces: SloSpace,
                     cache: ResourceCache, config: OptimizerConfig,
                     ) -> list[AllocationPlan | None]:
    """Plan every window, warm-starting each GA from the previous plan.

    A window whose optimization fails yields None and the horizon continues.
    """
    plans: list[AllocationPlan | None] = []
    prev: Optional[Mapping[str, float]] = None
    for t, win in enumerate(windows):
        try:
            paths = critical_paths(win.signatures, config.impact_threshold)
            plan = genetic_search(spaces, paths, win.qps, cache,
                                  replace(config, seed=config.seed + t),
                                  warm_start=prev)
        except (OptimizerError, KeyError):
            plans.append(None)
            continue
        plans.append(plan)
        prev = plan.assignment
    return plans

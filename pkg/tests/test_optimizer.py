"""Optimizer tests: candidate grids, critical paths, GA vs exhaustive."""

import itertools

import numpy as np
import pytest

import tracealloc.optimizer as optimizer
from helpers import random_optimizer_fixture
from tracealloc.fingerprint import Backbone, DeviationSubgraph, StructuralSignature
from tracealloc.optimizer import (
    CriticalPathSet,
    OptimizerConfig,
    OptimizerError,
    SloSpace,
    critical_paths,
    discretize_slo_space,
    fitness,
    genetic_search,
    optimize_horizon,
    violation,
    WindowInput,
)


def exhaustive_optimum(spaces, paths, qps, cache, config):
    """Brute-force minimum fitness over the full candidate product."""
    services = spaces.services()
    best = None
    for combo in itertools.product(*(spaces.candidates[s] for s in services)):
        f = fitness(dict(zip(services, combo)), qps, cache, paths, config)
        best = f if best is None else min(best, f)
    return best


class RecordingTable(optimizer._FitnessTable):
    """Fitness table that logs the per-call population minimum."""

    minima: list[float] = []

    def evaluate(self, pop):
        fit = super().evaluate(pop)
        RecordingTable.minima.append(float(np.min(fit)))
        return fit


class TestSloSpace:
    def test_percentile_grid_matches_numpy(self, rng):
        samples = {"a": list(rng.uniform(100, 9000, size=200))}
        space = discretize_slo_space(samples, step_count=10)
        lo = np.percentile(samples["a"], 1)
        hi = np.percentile(samples["a"], 99)
        cands = space.candidates["a"]
        assert len(cands) == 11
        assert cands[0] == pytest.approx(lo)
        assert cands[-1] == pytest.approx(hi)
        steps = np.diff(cands)
        assert np.allclose(steps, steps[0])

    def test_degenerate_samples_single_candidate(self):
        space = discretize_slo_space({"a": [500.0] * 20})
        assert space.candidates["a"] == [500.0]
        assert space.step["a"] == 0.0

    def test_empty_samples_rejected(self):
        with pytest.raises(OptimizerError):
            discretize_slo_space({"a": []})


class TestCriticalPaths:
    @staticmethod
    def _sig(p_exec):
        backbone = Backbone(["a", "b", "c"], [(0, 1), (1, 2)])
        dev = DeviationSubgraph(
            nodes=((1, "x"),), edges=(), divergence=1, merge=2,
            features=(1.0, 1.0, 1.0, p_exec, 0.0), kind="retry")
        return StructuralSignature(backbone, [dev], frozenset("abcx"))

    def test_backbone_paths_always_included(self):
        out = critical_paths([self._sig(0.1)])
        assert ("a", "b", "c") in out.paths

    def test_high_impact_deviation_extends(self):
        out = critical_paths([self._sig(0.8)], impact_threshold=0.5)
        assert ("a", "b", "x", "c") in out.paths
        assert "deviation:retry" in out.provenance

    def test_low_impact_deviation_skipped(self):
        out = critical_paths([self._sig(0.2)], impact_threshold=0.5)
        assert out.paths == [("a", "b", "c")]

    def test_empty_rejected(self):
        with pytest.raises(OptimizerError):
            critical_paths([])


class TestViolation:
    def test_hand_computed(self):
        paths = CriticalPathSet([("a", "b"), ("b", "c")])
        assign = {"a": 400.0, "b": 500.0, "c": 300.0}
        assert violation(assign, paths, 700.0) == pytest.approx(200.0 + 100.0)
        assert violation(assign, paths, 1000.0) == 0.0

    def test_missing_service_rejected(self):
        with pytest.raises(OptimizerError):
            violation({"a": 1.0}, CriticalPathSet([("a", "b")]), 10.0)


class TestGeneticSearch:
    def test_within_tolerance_of_exhaustive(self, rng):
        for i in range(10):
            spaces, paths, qps, cache, t_e2e = random_optimizer_fixture(rng)
            cfg = OptimizerConfig(t_e2e=t_e2e, seed=int(rng.integers(1 << 30)))
            opt = exhaustive_optimum(spaces, paths, qps, cache, cfg)
            plan = genetic_search(spaces, paths, qps, cache, cfg)
            got = fitness(plan.assignment, qps, cache, paths, cfg)
            assert got <= opt * 1.02 + 1e-9

    def test_elitism_minima_monotone(self, rng, monkeypatch):
        monkeypatch.setattr(optimizer, "_FitnessTable", RecordingTable)
        spaces, paths, qps, cache, t_e2e = random_optimizer_fixture(rng)
        RecordingTable.minima = []
        genetic_search(spaces, paths, qps, cache,
                       OptimizerConfig(t_e2e=t_e2e, seed=5))
        seq = RecordingTable.minima
        assert len(seq) >= 2
        for i in range(1, len(seq)):
            assert seq[i] <= min(seq[:i]) + 1e-9

    def test_feasible_plan_has_zero_violation(self, rng):
        for i in range(10):
            spaces, paths, qps, cache, t_e2e = random_optimizer_fixture(rng)
            plan = genetic_search(spaces, paths, qps, cache,
                                  OptimizerConfig(t_e2e=t_e2e, seed=i))
            recomputed = violation(plan.assignment, paths, t_e2e)
            assert recomputed == pytest.approx(plan.violation)
            if plan.feasible:
                assert recomputed == 0.0

    def test_deterministic_given_seed(self, rng):
        spaces, paths, qps, cache, t_e2e = random_optimizer_fixture(rng)
        cfg = OptimizerConfig(t_e2e=t_e2e, seed=77)
        p1 = genetic_search(spaces, paths, qps, cache, cfg)
        p2 = genetic_search(spaces, paths, qps, cache, cfg)
        assert p1.assignment == p2.assignment
        assert p1.total_cost == p2.total_cost

    def test_singleton_space_shortcut(self, rng):
        spaces, paths, qps, cache, t_e2e = random_optimizer_fixture(rng)
        single = SloSpace({s: [c[-1]] for s, c in spaces.candidates.items()})
        # Rebuild the cache for exactly these cells.
        from tracealloc.costmodel import (AnalyticalCostModel,
                                          ServiceCostParams, build_cache)
        params = {s: ServiceCostParams(work_per_request=min(c) * 0.5)
                  for s, c in single.candidates.items()}
        cache = build_cache(AnalyticalCostModel(params),
                            {s: [qps[s]] for s in single.candidates},
                            single.candidates)
        plan = genetic_search(single, paths, qps, cache,
                              OptimizerConfig(t_e2e=t_e2e, seed=0))
        assert plan.generations == 1
        assert plan.assignment == {s: c[0] for s, c in single.candidates.items()}

    def test_warm_start_at_least_as_good(self, rng):
        spaces, paths, qps, cache, t_e2e = random_optimizer_fixture(rng)
        cfg = OptimizerConfig(t_e2e=t_e2e, seed=3)
        cold = genetic_search(spaces, paths, qps, cache, cfg)
        warm = genetic_search(spaces, paths, qps, cache, cfg,
                              warm_start=cold.assignment)
        f_cold = fitness(cold.assignment, qps, cache, paths, cfg)
        f_warm = fitness(warm.assignment, qps, cache, paths, cfg)
        assert f_warm <= f_cold + 1e-9

    def test_empty_space_rejected(self, rng):
        _, paths, qps, cache, t_e2e = random_optimizer_fixture(rng)
        with pytest.raises(OptimizerError):
            genetic_search(SloSpace({}), paths, qps, cache,
                           OptimizerConfig(t_e2e=t_e2e))


class TestHorizon:
    def test_warm_start_chain_and_failure_isolation(self, rng):
        spaces, paths, qps, cache, t_e2e = random_optimizer_fixture(rng)
        sig = TestCriticalPaths._sig(0.0)
        # The signature's services are absent from the space: that window
        # fails and yields None while the horizon continues.
        good = StructuralSignature(
            Backbone(list(spaces.services()),
                     [(i, i + 1) for i in range(len(spaces.services()) - 1)]),
            [], frozenset(spaces.services()))
        windows = [WindowInput(qps, [good]), WindowInput(qps, [sig]),
                   WindowInput(qps, [good])]
        plans = optimize_horizon(windows, spaces, cache,
                                 OptimizerConfig(t_e2e=t_e2e, seed=1))
        assert plans[1] is None
        assert plans[0] is not None and plans[2] is not None

"""Forecast tests: exogenous fit recovery, residual process, propagation."""

import numpy as np
import pytest

from helpers import chain_trace
from tracealloc.forecast import (
    ExogenousFeatures,
    ForecastError,
    PatternProfile,
    fit_rate_model,
    forecast_rate,
    invocation_multiplicity,
    pattern_profile,
    propagate_all,
    propagate_qps,
    window_features,
)


class TestFeatures:
    def test_design_row_one_hot(self):
        f = ExogenousFeatures(hour_of_day=5, day_of_week=2, special_day=True)
        row = f.design_row()
        assert row.shape == (32,)
        assert row[5] == 1.0 and row[24 + 2] == 1.0 and row[31] == 1.0
        assert row.sum() == 3.0

    def test_range_validation(self):
        with pytest.raises(ValueError):
            ExogenousFeatures(hour_of_day=24, day_of_week=0)
        with pytest.raises(ValueError):
            ExogenousFeatures(hour_of_day=0, day_of_week=7)

    def test_window_features_cadence(self):
        f = window_features(0)
        assert (f.hour_of_day, f.day_of_week) == (0, 0)
        f = window_features(25)
        assert (f.hour_of_day, f.day_of_week) == (1, 1)
        # Daily cadence: one window per day walks the week.
        f = window_features(9, windows_per_day=1)
        assert (f.hour_of_day, f.day_of_week) == (0, 2)


class TestRateModel:
    def test_short_series_rejected(self):
        feats = [window_features(i) for i in range(10)]
        with pytest.raises(ForecastError):
            fit_rate_model(list(range(10)), feats, seasonal_period=7)

    def test_length_mismatch_rejected(self):
        feats = [window_features(i) for i in range(14)]
        with pytest.raises(ForecastError):
            fit_rate_model(list(range(13)), feats, seasonal_period=7)

    def test_recovers_planted_means_zero_noise(self):
        # y depends only on the calendar categories, so the fitted model's
        # predictions must reproduce each planted (hour, day) mean exactly.
        hour_effect = {h: 100 + 10 * h for h in range(24)}
        day_effect = {d: 50 * d for d in range(7)}
        feats = [window_features(i) for i in range(24 * 7 * 2)]
        y = [hour_effect[f.hour_of_day] + day_effect[f.day_of_week]
             for f in feats]
        model = fit_rate_model(y, feats, seasonal_period=7)
        for f, target in zip(feats, y):
            assert model.exogenous_prediction(f) == pytest.approx(target,
                                                                  abs=1e-6)
        assert np.max(np.abs(model.residual_history)) < 1e-6
        nxt = window_features(len(y))
        planted = hour_effect[nxt.hour_of_day] + day_effect[nxt.day_of_week]
        assert forecast_rate(model, nxt) == pytest.approx(planted, abs=1e-6)

    def test_forecast_non_negative(self):
        feats = [window_features(i, windows_per_day=1) for i in range(21)]
        y = [-50.0] * 21  # degenerate series must still clamp
        model = fit_rate_model(y, feats, seasonal_period=7)
        assert forecast_rate(model, window_features(21, windows_per_day=1)) == 0.0

    def test_residual_process_tracks_seasonal_lag(self):
        # Pure period-7 signal on constant exogenous rows: the seasonal
        # residual lag must carry the structure and keep forecasts close.
        rng = np.random.default_rng(7)
        pattern = [100, 120, 90, 150, 110, 80, 130]
        feats = [ExogenousFeatures(0, 0) for _ in range(35)]
        y = [pattern[i % 7] for i in range(35)]
        model = fit_rate_model(y, feats, seasonal_period=7)
        got = forecast_rate(model, ExogenousFeatures(0, 0))
        assert got == pytest.approx(pattern[35 % 7], rel=0.1)


class TestPropagation:
    def test_multiplicity_oracle(self):
        traces = [chain_trace("t0", ["a", "b", "b"]),
                  chain_trace("t1", ["a", "b", "c"])]
        assert invocation_multiplicity(traces, "b") == pytest.approx(3 / 2)
        assert invocation_multiplicity(traces, "a") == 1.0
        assert invocation_multiplicity(traces, "zzz") == 0.0

    def test_empty_assignment_rejected(self):
        with pytest.raises(ForecastError):
            invocation_multiplicity([], "a")
        with pytest.raises(ForecastError):
            pattern_profile(3, [])

    def test_propagate_hand_computed(self):
        profiles = {
            0: PatternProfile(0, multiplicities={"a": 1.0, "b": 2.0}),
            1: PatternProfile(1, multiplicities={"b": 1.0, "c": 3.0}),
        }
        rates = {0: 10.0, 1: 4.0}
        assert propagate_qps(rates, profiles, "b") == pytest.approx(10 * 2 + 4 * 1)
        out = propagate_all(rates, profiles)
        assert out == {"a": 10.0, "b": 24.0, "c": 12.0}

    def test_missing_profile_rejected(self):
        with pytest.raises(ForecastError):
            propagate_qps({0: 1.0}, {}, "a")

    def test_profile_built_from_traces(self):
        traces = [chain_trace(f"t{i}", ["a", "b"]) for i in range(4)]
        prof = pattern_profile(7, traces)
        assert prof.pattern_id == 7
        assert prof.multiplicities == {"a": 1.0, "b": 1.0}

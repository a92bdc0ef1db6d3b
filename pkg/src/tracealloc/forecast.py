"""Per-pattern request-rate forecasting and per-service QPS propagation.

The rate model is exogenous least squares (hour-of-day, day-of-week,
special-day indicators) with an AR(1)-plus-seasonal-lag residual process,
refit on the trailing history each window.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .trace_model import TraceGraph


class ForecastError(Exception):
    pass


@dataclass(frozen=True)
class ExogenousFeatures:
    hour_of_day: int
    day_of_week: int
    special_day: bool = False

    def __post_init__(self):
        if not (0 <= self.hour_of_day < 24):
            raise ValueError(f"hour_of_day out of range: {self.hour_of_day}")
        if not (0 <= self.day_of_week < 7):
            raise ValueError(f"day_of_week out of range: {self.day_of_week}")

    def design_row(self) -> np.ndarray:
        row = np.zeros(32)
        row[self.hour_of_day] = 1.0
        row[24 + self.day_of_week] = 1.0
        row[31] = 1.0 if self.special_day else 0.0
        return row


N_EXOG = 32  # 24 hour dummies + 7 day dummies + special-day flag


@dataclass
class PatternRateModel:
    coefficients: np.ndarray
    ar_coefficient: float
    seasonal_coefficient: float
    seasonal_period: int
    residual_history: np.ndarray

    def exogenous_prediction(self, features: ExogenousFeatures) -> float:
        return float(self.coefficients @ features.design_row())


@dataclass
class PatternProfile:
    pattern_id: int
    rate_series: list[tuple[int, float]] = field(default_factory=list)
    multiplicities: dict[str, float] = field(default_factory=dict)


def invocation_multiplicity(traces: Sequence[TraceGraph], service: str) -> float:
    """Mean number of spans of a service per assigned trace."""
    if not traces:
        raise ForecastError("multiplicity is undefined for an empty assignment")
    total = sum(sum(1 for sp in t.spans.values() if sp.service == service) for t in traces)
    return total / len(traces)


def pattern_profile(pattern_id: int, traces: Sequence[TraceGraph]) -> PatternProfile:
    """Profile with multiplicities for every service observed in the traces."""
    if not traces:
        raise ForecastError(f"no traces assigned to pattern {pattern_id}")
    services = sorted({sp.service for t in traces for sp in t.spans.values()})
    return PatternProfile(
        pattern_id=pattern_id,
        multiplicities={s: invocation_multiplicity(traces, s) for s in services},
    )


def fit_rate_model(series: Sequence[float], features: Sequence[ExogenousFeatures],
                   seasonal_period: int = 7) -> PatternRateModel:
    """Least-squares exogenous fit plus AR(1) + seasonal-lag residual fit."""
    y = np.asarray(series, dtype=float)
    if len(y) != len(features):
        raise ForecastError("series and features must have equal length")
    minimum = 2 * seasonal_period
    if len(y) < minimum:
        raise ForecastError(
            f"series too short: {len(y)} points, need at least {minimum}")
    X = np.vstack([f.design_row() for f in features])
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta

    # Residual process: r_t ~ a * r_{t-1} + b * r_{t-period}
    lag1 = resid[seasonal_period - 1:-1]
    lagp = resid[:-seasonal_period]
    target = resid[seasonal_period:]
    A = np.column_stack([lag1, lagp])
    if len(target) >= 2 and np.linalg.norm(A) > 0:
        coefs, *_ = np.linalg.lstsq(A, target, rcond=None)
        a, b = float(coefs[0]), float(coefs[1])
    else:
        a = b = 0.0
    return PatternRateModel(
        coefficients=beta,
        ar_coefficient=a,
        seasonal_coefficient=b,
        seasonal_period=seasonal_period,
        residual_history=resid,
    )


def forecast_rate(model: PatternRateModel, features: ExogenousFeatures) -> float:
    """One-step-ahead rate forecast, clamped to be non-negative."""
    pred = model.exogenous_prediction(features)
    hist = model.residual_history
    if len(hist) >= 1:
        pred += model.ar_coefficient * hist[-1]
    if len(hist) >= model.seasonal_period:
        pred += model.seasonal_coefficient * hist[-model.seasonal_period]
    return max(0.0, float(pred))


def propagate_qps(pattern_rates: Mapping[int, float],
                  profiles: Mapping[int, PatternProfile], service: str) -> float:
    """Per-service QPS as the rate-weighted sum of invocation multiplicities."""
    total = 0.0
    for pattern_id, rate in pattern_rates.items():
        profile = profiles.get(pattern_id)
        if profile is None:
            raise ForecastError(f"no profile for pattern {pattern_id}")
        total += rate * profile.multiplicities.get(service, 0.0)
    return total


def propagate_all(pattern_rates: Mapping[int, float],
                  profiles: Mapping[int, PatternProfile]) -> dict[str, float]:
    """QPS for every service named by any profile."""
    services = sorted({s for p in profiles.values() for s in p.multiplicities})
    return {s: propagate_qps(pattern_rates, profiles, s) for s in services}


def window_features(index: int, windows_per_day: int = 24,
                    special: bool = False) -> ExogenousFeatures:
    """Calendar features for a window index at a fixed windows-per-day cadence."""
    hour = int(index % windows_per_day * (24 / windows_per_day)) % 24
    day = (index // windows_per_day) % 7
    return ExogenousFeatures(hour_of_day=hour, day_of_week=day, special_day=special)

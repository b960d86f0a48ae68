"""Performance metrics, gain ratios, and the selection objective.

A gain is always oriented so that values above 1.0 mean the optimized
version is better: cost metrics (latency, memory, cpu_cycles, energy)
divide original by optimized, the benefit metric (throughput) divides
optimized by original.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .targetmap import LocDiff


class Metric(Enum):
    LATENCY = "latency"
    MEMORY = "memory"
    CPU_CYCLES = "cpu_cycles"
    THROUGHPUT = "throughput"
    ENERGY = "energy"


# Lower is better for these; higher is better for the rest.
COST_METRICS = frozenset({Metric.LATENCY, Metric.MEMORY, Metric.CPU_CYCLES, Metric.ENERGY})
BENEFIT_METRICS = frozenset({Metric.THROUGHPUT})

# A variant counts as improved on a metric when its gain beats this margin.
DEFAULT_IMPROVEMENT_THRESHOLD = 0.10

# When no objective is configured, select on latency alone.
DEFAULT_OBJECTIVE: dict[Metric, float] = {Metric.LATENCY: 1.0}


class NonPositiveValue(ValueError):
    """Measured values must be strictly positive to form a ratio."""


class EmptyInput(ValueError):
    """An aggregate was requested over zero values."""


class MissingMetric(KeyError):
    """The objective references a metric absent from the gains."""


def gain(original: float, optimized: float, metric: Metric) -> float:
    """Ratio oriented so that > 1.0 means the optimized version won."""
    if original <= 0 or optimized <= 0:
        raise NonPositiveValue(
            f"{metric.value}: values must be > 0, got original={original}, optimized={optimized}"
        )
    if metric in BENEFIT_METRICS:
        return optimized / original
    return original / optimized


def pct_opt(gains: list[float], threshold: float = DEFAULT_IMPROVEMENT_THRESHOLD) -> float:
    """Percentage of gains at or above ``1 + threshold``.

    The boundary counts: with the default threshold a gain of exactly 1.10
    is an improvement.
    """
    if not gains:
        raise EmptyInput("pct_opt needs at least one gain")
    if threshold < 0:
        raise ValueError(f"threshold must be >= 0, got {threshold}")
    improved = sum(1 for g in gains if g >= 1.0 + threshold)
    return 100.0 * improved / len(gains)


def geometric_mean(values: list[float]) -> float:
    if not values:
        raise EmptyInput("geometric mean needs at least one value")
    if any(v <= 0 for v in values):
        raise NonPositiveValue("geometric mean requires positive values")
    return math.exp(sum(math.log(v) for v in values) / len(values))


def objective_score(gains: dict[Metric, float], weights: dict[Metric, float] | None = None) -> float:
    """Weighted geometric mean of gains over the metrics named in ``weights``.

    Metrics outside the objective are ignored; a metric in the objective but
    absent from ``gains`` raises ``MissingMetric``.
    """
    if weights is None:
        weights = DEFAULT_OBJECTIVE
    if not weights:
        raise EmptyInput("objective needs at least one weighted metric")
    total_weight = 0.0
    acc = 0.0
    for metric, weight in weights.items():
        if weight <= 0:
            raise ValueError(f"weight for {metric.value} must be > 0, got {weight}")
        if metric not in gains:
            raise MissingMetric(metric.value)
        g = gains[metric]
        if g <= 0:
            raise NonPositiveValue(f"gain for {metric.value} must be > 0, got {g}")
        acc += weight * math.log(g)
        total_weight += weight
    return math.exp(acc / total_weight)


@dataclass(frozen=True)
class GainReport:
    """Per-metric gains of one variant against the baseline, the size of the
    code change, and the scalar score used for selection."""

    gains: dict[Metric, float]
    improved: dict[Metric, bool]
    loc_diff: "LocDiff"
    objective_score: float
    threshold: float = field(default=DEFAULT_IMPROVEMENT_THRESHOLD)


def build_gain_report(
    baseline: dict[Metric, float],
    candidate: dict[Metric, float],
    loc: "LocDiff",
    weights: dict[Metric, float] | None = None,
    threshold: float = DEFAULT_IMPROVEMENT_THRESHOLD,
) -> GainReport:
    """Compare two measurement maps on their shared metrics.

    Only metrics present on both sides yield gains; the objective is then
    evaluated over those gains.
    """
    gains: dict[Metric, float] = {}
    for metric in Metric:
        if metric in baseline and metric in candidate:
            gains[metric] = gain(baseline[metric], candidate[metric], metric)
    if not gains:
        raise EmptyInput("no metric present in both measurement maps")
    improved = {m: g >= 1.0 + threshold for m, g in gains.items()}
    score = objective_score(gains, weights)
    return GainReport(
        gains=gains, improved=improved, loc_diff=loc, objective_score=score, threshold=threshold
    )

"""Evaluation metrics: EX, FPR, SLR, sensitivity slopes and curve interpolation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Iterable, Sequence

from .schema import ColumnRef


class MetricsError(ValueError):
    pass


class EmptyEvaluation(MetricsError):
    pass


class EmptyRetrieval(MetricsError):
    pass


class DegeneratePoints(MetricsError):
    pass


class OutOfRange(MetricsError):
    pass


def round_pct(value: float, places: int = 2) -> float:
    """Half-even rounding for table output (``repr`` of the float avoids binary artifacts)."""
    quant = Decimal(1).scaleb(-places)
    return float(Decimal(repr(float(value))).quantize(quant, rounding=ROUND_HALF_EVEN))


def false_positive_rate(retrieved: Iterable[ColumnRef], required: Iterable[ColumnRef]) -> float:
    retrieved = set(retrieved)
    if not retrieved:
        raise EmptyRetrieval("FPR is undefined for an empty retrieval")
    return len(retrieved - set(required)) / len(retrieved)


@dataclass(frozen=True)
class QueryEvaluation:
    task_id: str
    ex_hit: bool
    fpr: float
    slr_hit: bool
    retrieved_count: int
    required_count: int
    provider_calls: int = 0
    # |required ∩ retrieved|; lets fpr and slr_hit be checked against the counts
    relevant_retrieved: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.fpr <= 1.0:
            raise MetricsError(f"fpr out of [0, 1]: {self.fpr}")
        if self.retrieved_count < 1 or self.required_count < 0 or self.provider_calls < 0:
            raise MetricsError("counts must be non-negative and retrieval non-empty")
        if self.relevant_retrieved is not None:
            expected = (self.retrieved_count - self.relevant_retrieved) / self.retrieved_count
            if not math.isclose(expected, self.fpr, rel_tol=0, abs_tol=1e-12):
                raise MetricsError(f"fpr {self.fpr} inconsistent with counts ({expected})")
            if self.slr_hit and self.relevant_retrieved != self.required_count:
                raise MetricsError("slr_hit requires every required column to be retrieved")

    @classmethod
    def from_sets(cls, task_id: str, ex_hit: bool, retrieved: Iterable[ColumnRef],
                  required: Iterable[ColumnRef], provider_calls: int = 0) -> "QueryEvaluation":
        retrieved, required = set(retrieved), set(required)
        relevant = len(retrieved & required)
        return cls(
            task_id=task_id,
            ex_hit=bool(ex_hit),
            fpr=false_positive_rate(retrieved, required),
            slr_hit=required <= retrieved,
            retrieved_count=len(retrieved),
            required_count=len(required),
            provider_calls=provider_calls,
            relevant_retrieved=relevant,
        )


def _require(evals: Sequence[QueryEvaluation]) -> None:
    if not evals:
        raise EmptyEvaluation("no evaluations to aggregate")


def execution_accuracy(evals: Sequence[QueryEvaluation]) -> float:
    _require(evals)
    return 100.0 * sum(1 for e in evals if e.ex_hit) / len(evals)


def schema_linking_recall(evals: Sequence[QueryEvaluation]) -> float:
    _require(evals)
    return 100.0 * sum(1 for e in evals if e.slr_hit) / len(evals)


def mean_fpr(evals: Sequence[QueryEvaluation]) -> float:
    """Mean of per-query rates; ``fsum`` keeps the result independent of order."""
    _require(evals)
    return math.fsum(e.fpr for e in evals) / len(evals)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    if not values:
        raise EmptyEvaluation("no values")
    n = len(values)
    mean = math.fsum(values) / n
    if n == 1:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var)


@dataclass(frozen=True)
class CurvePoint:
    fpr: float
    accuracy: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.fpr) and math.isfinite(self.accuracy)):
            raise MetricsError("curve points must be finite")
        if not 0.0 <= self.fpr <= 1.0:
            raise MetricsError(f"curve fpr out of [0, 1]: {self.fpr}")


def sensitivity(points: Sequence[CurvePoint]) -> float:
    """Least-squares slope of accuracy against FPR."""
    if len(points) < 2:
        raise DegeneratePoints("need at least two points")
    n = len(points)
    mx = math.fsum(p.fpr for p in points) / n
    my = math.fsum(p.accuracy for p in points) / n
    sxx = math.fsum((p.fpr - mx) ** 2 for p in points)
    if sxx == 0.0:
        raise DegeneratePoints("all points share one fpr value")
    sxy = math.fsum((p.fpr - mx) * (p.accuracy - my) for p in points)
    return sxy / sxx


def interpolate_curve(points: Sequence[CurvePoint], query_fpr: float) -> float:
    """Piecewise-linear accuracy at ``query_fpr``; repeated knots are averaged."""
    if len(points) < 2:
        raise DegeneratePoints("need at least two points")
    grouped: dict[float, list[float]] = {}
    for p in points:
        grouped.setdefault(p.fpr, []).append(p.accuracy)
    knots = sorted((x, math.fsum(ys) / len(ys)) for x, ys in grouped.items())
    lo, hi = knots[0][0], knots[-1][0]
    if not lo <= query_fpr <= hi:
        raise OutOfRange(f"fpr {query_fpr} outside [{lo}, {hi}]")
    for (x0, y0), (x1, y1) in zip(knots, knots[1:]):
        if query_fpr == x0:
            return y0
        if query_fpr == x1:
            return y1
        if x0 < query_fpr < x1:
            t = (query_fpr - x0) / (x1 - x0)
            return y0 + t * (y1 - y0)
    return knots[0][1]  # single distinct knot queried exactly


@dataclass
class RunReport:
    run_id: str
    config: dict
    per_query: list[QueryEvaluation]
    seed: int
    ex_pct: float = 0.0
    mean_fpr: float = 0.0
    slr_pct: float = 0.0
    labels: dict = field(default_factory=dict)

    @classmethod
    def build(cls, run_id: str, config: dict, per_query: Sequence[QueryEvaluation], seed: int,
              labels: dict | None = None) -> "RunReport":
        per_query = sorted(per_query, key=lambda e: e.task_id)
        if per_query:
            ex, fpr, slr = execution_accuracy(per_query), mean_fpr(per_query), schema_linking_recall(per_query)
        else:
            ex = fpr = slr = 0.0
        return cls(run_id, dict(config), list(per_query), seed, ex, fpr, slr, dict(labels or {}))

    def recomputed(self) -> "RunReport":
        return RunReport.build(self.run_id, self.config, self.per_query, self.seed, self.labels)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["per_query"] = [asdict(e) for e in self.per_query]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        evals = [QueryEvaluation(**e) for e in data["per_query"]]
        return cls(
            run_id=data["run_id"],
            config=data["config"],
            per_query=evals,
            seed=data["seed"],
            ex_pct=data["ex_pct"],
            mean_fpr=data["mean_fpr"],
            slr_pct=data["slr_pct"],
            labels=data.get("labels", {}),
        )


@dataclass(frozen=True)
class BoundDiagnostic:
    ex_pct: float
    slr_pct: float
    gap: float
    epsilon: float
    flagged: bool

    def __str__(self) -> str:
        status = "FLAGGED" if self.flagged else "ok"
        return f"EX {self.ex_pct:.2f} vs SLR {self.slr_pct:.2f}: gap {self.gap:+.2f} (eps {self.epsilon}) {status}"


def slr_bound_check(report: RunReport, epsilon: float = 2.0) -> BoundDiagnostic:
    """EX should not exceed SLR by more than ``epsilon`` points; the gap is SLR - EX."""
    gap = report.slr_pct - report.ex_pct
    return BoundDiagnostic(report.ex_pct, report.slr_pct, gap, epsilon, report.ex_pct > report.slr_pct + epsilon)

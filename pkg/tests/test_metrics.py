import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slb.metrics import (
    CurvePoint,
    DegeneratePoints,
    EmptyEvaluation,
    EmptyRetrieval,
    MetricsError,
    OutOfRange,
    QueryEvaluation,
    RunReport,
    execution_accuracy,
    false_positive_rate,
    interpolate_curve,
    mean_fpr,
    mean_std,
    round_pct,
    schema_linking_recall,
    sensitivity,
    slr_bound_check,
)
from slb.schema import ColumnRef


def refs(*names):
    return {ColumnRef("d", "t", n) for n in names}


def ev(i, ex=True, fpr=0.0, slr=True, retrieved=1, required=1):
    return QueryEvaluation(f"q{i:03d}", ex, fpr, slr, retrieved, required)


def report(evals):
    return RunReport.build("r", {}, evals, 0)


def test_accuracy_fixtures():
    assert execution_accuracy([ev(0), ev(1), ev(2), ev(3, ex=False)]) == 75.0
    assert execution_accuracy([ev(i) for i in range(5)]) == 100.0
    with pytest.raises(EmptyEvaluation):
        execution_accuracy([])


def test_fpr_fixtures():
    assert false_positive_rate(refs("a", "b"), refs("a", "b")) == 0.0
    retrieved = refs(*"abcdefghij")
    assert false_positive_rate(retrieved, refs("a", "z")) == pytest.approx(0.9)
    with pytest.raises(EmptyRetrieval):
        false_positive_rate(set(), refs("a"))


def test_recall_fixtures():
    evals = [ev(i, slr=i < 8) for i in range(10)]
    assert schema_linking_recall(evals) == 80.0
    with pytest.raises(EmptyEvaluation):
        schema_linking_recall([])


def test_from_sets_consistency():
    e = QueryEvaluation.from_sets("q", True, refs("a", "b", "c", "d"), refs("a", "z"))
    assert e.fpr == 0.75 and not e.slr_hit
    assert e.retrieved_count == 4 and e.required_count == 2 and e.relevant_retrieved == 1
    with pytest.raises(MetricsError):
        QueryEvaluation("q", True, 0.5, True, 4, 1, relevant_retrieved=1)
    with pytest.raises(MetricsError):
        QueryEvaluation("q", True, 1.5, True, 4, 1)


@settings(max_examples=200)
@given(st.sets(st.sampled_from("abcdefgh"), min_size=1), st.sets(st.sampled_from("abcdefgh")))
def test_fpr_range_and_zero_iff_subset(retrieved, required):
    rate = false_positive_rate(refs(*retrieved), refs(*required))
    assert 0.0 <= rate <= 1.0
    assert (rate == 0.0) == (retrieved <= required)


def test_sensitivity_line_and_constant():
    line = [CurvePoint(x, 50 - 20 * x) for x in (0.0, 0.1, 0.35, 0.9)]
    assert sensitivity(line) == pytest.approx(-20, abs=1e-9)
    assert sensitivity([CurvePoint(x, 42.0) for x in (0.0, 0.5, 1.0)]) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DegeneratePoints):
        sensitivity([CurvePoint(0.3, 1.0), CurvePoint(0.3, 2.0)])
    with pytest.raises(DegeneratePoints):
        sensitivity([CurvePoint(0.3, 1.0)])


@pytest.mark.parametrize("seed", range(20))
def test_sensitivity_matches_lstsq(seed):
    rng = random.Random(seed)
    pts = [CurvePoint(rng.random(), rng.uniform(0, 100)) for _ in range(rng.randint(2, 15))]
    x = np.array([p.fpr for p in pts])
    design = np.vstack([x, np.ones_like(x)]).T
    slope, _ = np.linalg.lstsq(design, np.array([p.accuracy for p in pts]), rcond=None)[0]
    assert sensitivity(pts) == pytest.approx(slope, rel=1e-9, abs=1e-9)


_points = st.lists(
    st.builds(CurvePoint, st.floats(0, 1), st.floats(0, 100)), min_size=2, max_size=10
).filter(lambda ps: len({p.fpr for p in ps}) > 1 and np.var([p.fpr for p in ps]) > 1e-6)


@settings(max_examples=150, deadline=None)
@given(_points, st.randoms())
def test_sensitivity_order_and_duplication_invariant(points, rnd):
    base = sensitivity(points)
    shuffled = list(points)
    rnd.shuffle(shuffled)
    assert sensitivity(shuffled) == pytest.approx(base, rel=1e-7, abs=1e-6)
    assert sensitivity(points + points) == pytest.approx(base, rel=1e-7, abs=1e-6)


def test_interpolation_fixtures():
    pts = [CurvePoint(0, 60), CurvePoint(1, 40)]
    assert interpolate_curve(pts, 0.5) == 50.0
    assert interpolate_curve(pts, 0.0) == 60 and interpolate_curve(pts, 1.0) == 40
    with pytest.raises(OutOfRange):
        interpolate_curve(pts, 1.01)
    line = [CurvePoint(x, 70 - 30 * x) for x in (0.8, 0.2, 0.5)]
    for q in (0.2, 0.25, 0.4, 0.5, 0.66, 0.8):
        assert interpolate_curve(line, q) == pytest.approx(70 - 30 * q)
    with pytest.raises(DegeneratePoints):
        interpolate_curve(pts[:1], 0.0)


def test_interpolation_averages_repeated_knots():
    pts = [CurvePoint(0, 60), CurvePoint(0, 40), CurvePoint(1, 10)]
    assert interpolate_curve(pts, 0.0) == 50.0
    assert interpolate_curve(pts, 0.5) == 30.0


@settings(max_examples=150)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=8, unique=True), st.floats(0, 1))
def test_interpolation_monotone_between_knots(xs, t):
    xs = sorted(xs)
    pts = [CurvePoint(x, 100 - 50 * i) for i, x in enumerate(xs)]  # decreasing knots
    q1 = xs[0] + t * (xs[-1] - xs[0])
    q2 = min(xs[-1], q1 + 0.01)
    a1, a2 = interpolate_curve(pts, q1), interpolate_curve(pts, q2)
    assert a2 <= a1 + 1e-9
    for p in pts:
        assert interpolate_curve(pts, p.fpr) == p.accuracy


@settings(max_examples=100)
@given(st.lists(st.tuples(st.booleans(), st.floats(0, 1), st.booleans()), min_size=1, max_size=30), st.randoms())
def test_aggregates_permutation_invariant(rows, rnd):
    evals = [ev(i, ex, fpr, slr) for i, (ex, fpr, slr) in enumerate(rows)]
    shuffled = list(evals)
    rnd.shuffle(shuffled)
    assert execution_accuracy(shuffled) == execution_accuracy(evals)
    assert schema_linking_recall(shuffled) == schema_linking_recall(evals)
    assert mean_fpr(shuffled) == mean_fpr(evals)


def test_mean_fpr_is_mean_of_rates():
    # pooled ratio would be 11/20; the mean of per-query rates is 0.5
    a = QueryEvaluation.from_sets("a", True, refs(*"abcdefghij"), refs("a"))
    b = QueryEvaluation.from_sets("b", True, refs(*"abcdefghij"), refs(*"abcdefghi"))
    assert mean_fpr([a, b]) == pytest.approx(0.5)


def test_mean_std_sample():
    mean, std = mean_std([1.0, 2.0, 3.0, 4.0])
    assert mean == 2.5 and std == pytest.approx(float(np.std([1, 2, 3, 4], ddof=1)))
    assert mean_std([5.0]) == (5.0, 0.0)


def test_round_pct_half_even():
    assert round_pct(12.345) == 12.34
    assert round_pct(12.355) == 12.36
    assert round_pct(0.125) == 0.12
    assert round_pct(67.35) == 67.35
    assert round_pct(100.0) == 100.0


def test_report_roundtrip_and_recompute():
    evals = [QueryEvaluation.from_sets(f"q{i}", i % 3 != 0, refs("a", "b"), refs("a")) for i in range(7)]
    rep = RunReport.build("r1", {"k": 1}, list(reversed(evals)), 3)
    assert [e.task_id for e in rep.per_query] == sorted(e.task_id for e in evals)
    again = RunReport.from_dict(rep.to_dict())
    assert again == rep and again.recomputed() == rep
    assert math.isclose(rep.mean_fpr, 0.5)


def test_slr_bound_examples():
    full = report([ev(i, ex=i < 5, slr=True) for i in range(10)])
    d = slr_bound_check(full)
    assert not d.flagged and d.slr_pct == 100.0
    scripted = report([ev(i, ex=i < 15, slr=i < 16) for i in range(20)])
    d = slr_bound_check(scripted)
    assert (scripted.ex_pct, scripted.slr_pct) == (75.0, 80.0)
    assert not d.flagged and d.gap == pytest.approx(5.0)
    over = report([ev(i, ex=i < 9, slr=i < 8) for i in range(10)])
    assert slr_bound_check(over, epsilon=5).flagged
    assert "FLAGGED" in str(slr_bound_check(over, epsilon=5))

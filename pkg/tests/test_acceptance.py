"""Acceptance criteria 1-10. Each test carries an ``acceptance`` marker; the
terminal summary prints one PASS/FAIL/SKIP line per criterion."""

import json
import math
import os
import random
import re
import sqlite3
import time
from fractions import Fraction
from pathlib import Path

import pytest

from conftest import file_digest
from slb.bench import (
    ExperimentSpec,
    fpr_grid,
    load_dataset,
    padding_schemas,
    report_files,
    run_experiment,
)
from slb.executor import ErrorKind, ExecutionResult, Outcome, execute, results_match
from slb.linker import mock_link
from slb.llm import FunctionProvider, ScriptedProvider
from slb.metrics import (
    CurvePoint,
    QueryEvaluation,
    execution_accuracy,
    interpolate_curve,
    mean_fpr,
    round_pct,
    schema_linking_recall,
    sensitivity,
)
from slb.oracle import OracleError, column_drop_oracle, extract_required_columns, linking_targets
from slb.pipeline import CandidateSQL, PipelineConfig, run_pipeline, select
from slb.schema import Column, ColumnRef, Schema, Table, render_schema, schema_columns
from slb.simulate import SimulatedProvider
from slb.toy import toy_tasks

PROMPTS = Path(__file__).resolve().parents[1] / "src" / "slb" / "prompts"


def acceptance(number, title):
    return pytest.mark.acceptance(number, title)


def gold_answering(index, succeed=lambda question, columns: True, wrong="SELECT 'no' AS answer"):
    """Generation answers the gold SQL when ``succeed(question, shown column count)``."""
    gold = {t.question: t.gold_sql for t in index.tasks}

    def fn(request):
        user = request.messages[-1][1]
        if request.purpose != "generation":
            return "{}"
        question = user.split("### Question\n", 1)[1].split("\n\n###", 1)[0].strip()
        block = user.split("### Database schema\n", 1)[1].split("\n\n### Question", 1)[0]
        columns = sum(
            1 for line in block.splitlines()
            if line.startswith("  ") and not line.strip().startswith(("PRIMARY KEY", "FOREIGN KEY"))
        )
        sql = gold[question] if succeed(question, columns) else wrong
        return json.dumps({"sql": sql})

    return FunctionProvider(fn)


# ---------------------------------------------------------------------------


@acceptance(1, "oracle agrees with column-drop oracle on the bundled corpus")
def test_criterion_1_oracle_agreement(toy_schemas, toy_paths):
    corpus = toy_tasks()
    assert len(corpus) >= 40 and len({e["db_id"] for e in corpus}) >= 3
    text = " ".join(e["SQL"].upper() for e in corpus)
    for feature in ("JOIN", " AS ", "WITH ", "UNION", "GROUP BY", "COUNT(", "EXISTS", "SELECT *", ".*"):
        assert feature in text, feature
    start = time.monotonic()
    disagreements = []
    for entry in corpus:
        schema = toy_schemas[entry["db_id"]]
        parsed = extract_required_columns(entry["SQL"], schema)
        dropped = column_drop_oracle(entry["SQL"], schema, toy_paths[entry["db_id"]])
        if parsed.refs != dropped.refs or parsed.unresolved:
            disagreements.append(entry["question_id"])
    elapsed = time.monotonic() - start
    assert disagreements == []
    assert elapsed < 60, f"{elapsed:.1f}s"


def _universe():
    # a 1000-column synthetic target database: 50 tables of 20 columns
    tables = tuple(
        Table(f"t{i:02d}", tuple(Column(f"c{j:02d}", "TEXT") for j in range(20))) for i in range(50)
    )
    return Schema("universe", tables)


@acceptance(2, "mock linker keeps recall perfect and hits every target FPR")
def test_criterion_2_fpr_injection():
    universe = _universe()
    assert len(schema_columns(universe)) == 1000
    # high rates with many required columns need more than the target's own
    # columns, so the linker supplements from other databases
    pool = padding_schemas(2000)
    columns = schema_columns(universe)
    start = time.monotonic()
    trials = 0
    for rate in fpr_grid(10):
        for size in range(1, 21):
            rng = random.Random(trials)
            required = set(rng.sample(columns, size))
            out = mock_link(required, universe, pool, rate, rng)
            retrieved = set(out.retrieved)
            assert len(retrieved) == len(out.retrieved)
            assert required <= retrieved
            achieved = len(retrieved - required) / len(retrieved)
            assert abs(achieved - rate) <= 1 / len(retrieved), (rate, size, achieved)
            trials += 1
    elapsed = time.monotonic() - start
    assert trials == 200
    assert elapsed < 10, f"{elapsed:.1f}s"


@acceptance(3, "full-schema FPR on BIRD dev is 94.62 +/- 1.0 with SLR 100")
def test_criterion_3_bird_full_schema():
    root = os.environ.get("SLB_BIRD_DEV")
    if not root or not Path(root, "dev.json").is_file():
        pytest.skip("set SLB_BIRD_DEV to a local BIRD dev directory to run this check")
    index = load_dataset(root)
    evals, skipped = [], 0
    for t in index.tasks:
        schema = index.schema(t.db_id)
        try:
            required = linking_targets(extract_required_columns(t.gold_sql, schema), schema)
        except OracleError:
            skipped += 1
            continue
        evals.append(QueryEvaluation.from_sets(t.task_id, False, schema_columns(schema), required))
    print(f"BIRD dev: {len(evals)} queries, {skipped} skipped, full-schema FPR {100 * mean_fpr(evals):.2f}")
    assert abs(100 * mean_fpr(evals) - 94.62) <= 1.0
    assert schema_linking_recall(evals) == 100.0


def _refs(letters):
    return {ColumnRef("d", "t", c) for c in letters}


# (retrieved, required, ex_hit) rows with EX %, mean FPR and SLR % worked out by hand
METRIC_FIXTURES = [
    ([("a", "a", 1)], 100, Fraction(0), 100),
    ([("ab", "a", 0)], 0, Fraction(1, 2), 100),
    ([("abcd", "ae", 1)], 100, Fraction(3, 4), 0),
    ([("ab", "a", 1), ("a", "a", 0)], 50, Fraction(1, 4), 100),
    ([("abc", "a", 1), ("abc", "abc", 1), ("x", "a", 0)], Fraction(200, 3), Fraction(5, 9), Fraction(200, 3)),
    ([("abcdefghij", "a", 1)] * 4, 100, Fraction(9, 10), 100),
    ([("ab", "ab", 1)] * 3 + [("ab", "ab", 0)], 75, Fraction(0), 100),
    ([("ab", "a", 1)] * 7 + [("ab", "a", 0)] + [("b", "a", 0)] * 2, 70, Fraction(3, 5), 80),
    ([("abcde", "abcdef", 1)], 100, Fraction(0), 0),
    ([("a", "a", 1), ("abcd", "abc", 0), ("ab", "a", 1), ("abcd", "a", 0), ("abcde", "a", 0)], 40, Fraction(23, 50), 100),
    ([("b", "a", 0)] * 3, 0, Fraction(1), 0),
    ([("abc", "ab", i % 2 == 0) for i in range(6)], 50, Fraction(1, 3), 100),
]


@acceptance(4, "EX/FPR/SLR fixtures, sensitivity on exact lines, interpolation")
def test_criterion_4_metrics():
    assert len(METRIC_FIXTURES) == 12
    for rows, ex, fpr, slr in METRIC_FIXTURES:
        evals = [
            QueryEvaluation.from_sets(f"q{i}", bool(hit), _refs(ret), _refs(req))
            for i, (ret, req, hit) in enumerate(rows)
        ]
        assert abs(execution_accuracy(evals) - float(ex)) <= 1e-12
        assert abs(mean_fpr(evals) - float(fpr)) <= 1e-12
        assert abs(schema_linking_recall(evals) - float(slr)) <= 1e-12
        assert round_pct(execution_accuracy(evals)) == round(float(ex), 2)
    for slope, intercept in ((-20, 50), (0, 42), (35.5, 10), (-100, 100)):
        xs = (0.0, 0.01, 0.1, 0.35, 0.99)
        pts = [CurvePoint(x, intercept + slope * x) for x in xs]
        assert abs(sensitivity(pts) - slope) <= 1e-9
    pts = [CurvePoint(0.0, 60), CurvePoint(0.5, 55), CurvePoint(1.0, 40)]
    for p in pts:
        assert interpolate_curve(pts, p.fpr) == p.accuracy
    assert interpolate_curve(pts, 0.25) == 57.5
    assert interpolate_curve(pts, 0.75) == 47.5
    assert interpolate_curve([CurvePoint(0, 60), CurvePoint(1, 40)], 0.5) == 50.0


def _spec(out, data, kind, **kw):
    return ExperimentSpec(kind=kind, dataset_dir=data, output_dir=out, seed=7, **kw)


@acceptance(5, "every experiment kind is byte-identical across two runs with seed 7")
def test_criterion_5_determinism(toy_index, toy_root, tmp_path):
    start = time.monotonic()
    kinds = [
        ("FprSweep", dict(grid_n=3, repeats=1)),
        ("LinkerComparison", dict(repeats=2)),
        ("Ablation", dict(pipeline=PipelineConfig(selection_k=3, correction_max_rounds=2))),
    ]
    for kind, kw in kinds:
        digests = []
        for attempt in range(2):
            provider = SimulatedProvider(toy_index.tasks, toy_index.schemas, seed=7)
            out = tmp_path / f"{kind}_{attempt}"
            run_experiment(_spec(out, toy_root, kind, **kw), provider, toy_index)
            digests.append(report_files(out))
        assert digests[0] and digests[0] == digests[1], kind
    elapsed = time.monotonic() - start
    assert elapsed < 30, f"{elapsed:.1f}s"


@acceptance(6, "selection picks the majority, the earliest tied cluster, or the first when all fail")
def test_criterion_6_selection(tiny_db):
    def pick(sqls):
        return select([CandidateSQL(s) for s in sqls], tiny_db).sql

    split = ["SELECT 1", "SELECT COUNT(*) FROM t", "SELECT COUNT(a) FROM t", "SELECT 3", "SELECT 2"]
    assert pick(split) == "SELECT COUNT(*) FROM t"
    errors = ["SELECT nope FROM t", "SELEC 1", "SELECT * FROM missing", "DELETE FROM t", "SELECT v FROM t"]
    assert pick(errors) == "SELECT nope FROM t"
    tie = ["SELECT zz FROM t", "SELECT 5", "SELECT b FROM t WHERE a = 9", "SELECT 2 + 3", "SELECT a FROM t WHERE a > 9"]
    assert pick(tie) == "SELECT 5"


@acceptance(7, "EX comparator: order, cardinality, errors and float precision")
def test_criterion_7_comparator(tiny_db):
    def rows(*values):
        return ExecutionResult(Outcome.ROWS, rows=tuple(values))

    gold = execute("SELECT a, b FROM t ORDER BY a", tiny_db)
    assert results_match(execute("SELECT a, b FROM t ORDER BY a DESC", tiny_db), gold)
    assert not results_match(execute("SELECT a, b FROM t WHERE a < 3", tiny_db), gold)
    assert not results_match(rows((1,), (1,), (2,)), rows((1,), (2,)))
    assert not results_match(rows((1,), (2,)), rows((1,), (1,), (2,)))
    assert not results_match(ExecutionResult.error(ErrorKind.SYNTAX, "x"), rows())
    assert not results_match(ExecutionResult.error(ErrorKind.MISSING_ENTITY, "x"), gold)
    assert not results_match(ExecutionResult(Outcome.TIMEOUT), gold)
    assert results_match(rows((2.0 / 3.0,)), rows((0.666667,)))
    assert results_match(rows((123456.4,)), rows((123456.0,)))
    assert not results_match(rows((123457.0,)), rows((123456.0,)))


def _independent_prompt(task, schema):
    """The generation prompt formatted straight from the template files."""
    raw = (PROMPTS / "generation.txt").read_text(encoding="utf-8")
    system_part, user_part = raw.split("[user]\n", 1)
    system_part = system_part.replace("[system]\n", "", 1)
    header = (PROMPTS / "generation_headers.txt").read_text(encoding="utf-8").split("\n---\n")[0].strip()
    hint = f"### Hint\n{task.hint.strip()}" if task.hint.strip() else ""
    user = user_part.replace("{schema}", render_schema(schema, schema_columns(schema)))
    user = user.replace("{question}", task.question).replace("{hint_section}", hint)
    user = user.replace("{plan_section}", "").replace("{{", "{").replace("}}", "}")
    user = re.sub(r"\n{3,}", "\n\n", user).strip()
    return system_part.replace("{instruction_header}", header).strip(), user


@acceptance(8, "simplified configuration sends one call per query with the exact simplified prompt")
def test_criterion_8_configuration_identity(toy_index):
    config = PipelineConfig(augmentation_enabled=False, selection_k=1, correction_max_rounds=0)
    for t in toy_index.tasks:
        provider = ScriptedProvider([json.dumps({"sql": t.gold_sql})])
        outcome = run_pipeline(t, toy_index, config, provider)
        assert outcome.failure == "" and len(provider.calls) == 1 and outcome.provider_calls == 1
        request = provider.calls[0]
        got = (request.messages[0][1], request.messages[1][1])
        assert got == _independent_prompt(t, toy_index.schema(t.db_id)), t.task_id


def _threshold(question):
    import hashlib

    return int.from_bytes(hashlib.sha256(question.encode()).digest()[:8], "big") / 2**64


@acceptance(9, "sweep with column-count-dependent success gives a non-increasing curve and negative slope")
def test_criterion_9_curve_sanity(toy_index, toy_root, tmp_path):
    succeed = lambda q, n: _threshold(q) < 0.95 * math.exp(-n / 300)  # noqa: E731
    provider = gold_answering(toy_index, succeed)
    s = _spec(tmp_path / "out", toy_root, "FprSweep", grid_n=10, sample_fraction=1.0, repeats=2)
    run_experiment(s, provider, toy_index)
    summary = json.loads((s.output_dir / "summary_FprSweep.json").read_text())
    entry = summary["models"]["gpt-4o"]
    ordered = sorted(entry["points"])  # ascending fpr
    accuracies = [acc for _, acc in ordered]
    assert all(b <= a + 1e-9 for a, b in zip(accuracies, accuracies[1:])), ordered
    assert accuracies[0] > accuracies[-1]
    assert entry["sensitivity"] < 0


@acceptance(10, "database files are byte-identical after every experiment kind")
def test_criterion_10_read_only(toy_index, toy_root, tmp_path):
    db_files = sorted(toy_root.glob("dev_databases/*/*.sqlite"))
    before = {p: file_digest(p) for p in db_files}
    gold = {t.question: t.gold_sql for t in toy_index.tasks}
    hostile = ["DELETE FROM {t}", "DROP TABLE {t}", "UPDATE {t} SET rowid = rowid", "PRAGMA journal_mode = DELETE",
               "ATTACH DATABASE 'x.db' AS x", "SELECT 1; DROP TABLE {t}"]

    def fn(request):
        user = request.messages[-1][1]
        if request.purpose in ("generation", "correction"):
            question = user.split("### Question\n", 1)[1].split("\n\n###", 1)[0].strip()
            k = len(user) % (len(hostile) + 1)
            table = re.search(r"CREATE TABLE (\S+) \(", user).group(1)
            sql = gold[question] if k == len(hostile) else hostile[k].format(t=table)
            if request.purpose == "correction":
                return json.dumps({"critique": "c", "instructions": "i", "sql": sql})
            return json.dumps({"sql": sql})
        return "{}"

    provider = FunctionProvider(fn)
    for kind, kw in [("Ablation", dict(pipeline=PipelineConfig(selection_k=3, correction_max_rounds=3))),
                     ("FprSweep", dict(grid_n=3)), ("LinkerComparison", {}), ("SingleRun", {})]:
        run_experiment(_spec(tmp_path / kind, toy_root, kind, **kw), provider, toy_index)
    assert {p: file_digest(p) for p in db_files} == before
    for p in db_files:
        conn = sqlite3.connect(f"file:{p}?mode=ro", uri=True)
        assert conn.execute("PRAGMA integrity_check").fetchone()[0] == "ok"
        conn.close()

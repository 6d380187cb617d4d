import sqlite3

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import file_digest
from slb.executor import (
    ErrorKind,
    ExecutionResult,
    GoldExecutionFailed,
    Outcome,
    execute,
    fingerprint,
    format_tsv,
    is_error_fingerprint,
    is_read_statement,
    results_match,
)
from slb.toy import toy_tasks


def rows(*values):
    return ExecutionResult(Outcome.ROWS, rows=tuple(values), columns=tuple(f"c{i}" for i in range(len(values[0]) if values else 0)))


def test_basic_rows(tiny_db):
    result = execute("SELECT 1", tiny_db)
    assert result.outcome is Outcome.ROWS and result.rows == ((1,),)


def test_missing_column(tiny_db):
    result = execute("SELECT missing_col FROM t", tiny_db)
    assert result.outcome is Outcome.ERROR
    assert result.error_kind is ErrorKind.MISSING_ENTITY
    assert "missing_col" in result.message


def test_syntax_error(tiny_db):
    result = execute("SELEC a FROM t", tiny_db)
    assert result.error_kind is ErrorKind.SYNTAX


def test_timeout(tiny_db):
    sql = "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x+1 FROM c) SELECT COUNT(*) FROM c"
    result = execute(sql, tiny_db, timeout=0.5)
    assert result.outcome is Outcome.TIMEOUT
    assert result.rows is None and result.error_kind is None


def test_runaway_result_is_capped(tiny_db):
    sql = "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x+1 FROM c) SELECT * FROM c"
    result = execute(sql, tiny_db, timeout=30, max_rows=50_000)
    assert result.outcome is Outcome.ERROR and "exceeds" in result.message


@pytest.mark.parametrize(
    "sql",
    ["DELETE FROM t", "UPDATE t SET b = 'z'", "INSERT INTO t VALUES (9, 'q', 0)", "DROP TABLE t",
     "CREATE TABLE z (a)", "ATTACH DATABASE ':memory:' AS m", "PRAGMA writable_schema = 1",
     "WITH x AS (SELECT 1) DELETE FROM t", "SELECT 1; DELETE FROM t"],
)
def test_writes_are_rejected_and_file_unchanged(sql, tiny_db):
    before = file_digest(tiny_db)
    result = execute(sql, tiny_db)
    assert result.outcome is Outcome.ERROR
    assert file_digest(tiny_db) == before
    conn = sqlite3.connect(tiny_db)
    assert conn.execute("SELECT COUNT(*) FROM t").fetchone()[0] == 3
    conn.close()


def test_read_statement_check():
    assert is_read_statement("  -- note\n select 1")
    assert is_read_statement("WITH a AS (SELECT 1) SELECT * FROM a")
    assert not is_read_statement("/* x */ delete from t")


def test_normalization(tiny_db):
    result = execute("SELECT 2.0, 2.5, NULL, 'x'", tiny_db)
    assert result.rows == ((2, 2.5, None, "x"),)
    assert isinstance(result.rows[0][0], int)


def test_result_payload_invariants():
    with pytest.raises(ValueError):
        ExecutionResult(Outcome.ROWS)
    with pytest.raises(ValueError):
        ExecutionResult(Outcome.ERROR, rows=())
    with pytest.raises(ValueError):
        ExecutionResult(Outcome.TIMEOUT, error_kind=ErrorKind.SYNTAX)


def test_results_match_rules():
    a = rows((1, "a"), (2, "b"))
    assert results_match(rows((2, "b"), (1, "a")), a)
    assert not results_match(rows((1,)), rows((1,), (1,)))
    assert results_match(rows((1,)), rows((1,), (1,)), mode="set")
    assert not results_match(ExecutionResult(Outcome.TIMEOUT), a)
    assert not results_match(ExecutionResult.error(ErrorKind.SYNTAX, "x"), a)
    assert results_match(rows((0.1 + 0.2,)), rows((0.3,)))
    assert results_match(rows((3.14159265,)), rows((3.14159,)))
    assert not results_match(rows((3.1416,)), rows((3.1415,)))
    assert not results_match(rows((None,)), rows(("",)))
    with pytest.raises(GoldExecutionFailed):
        results_match(a, ExecutionResult.error(ErrorKind.RUNTIME, "broken"))
    with pytest.raises(ValueError):
        results_match(a, a, mode="bag")


def test_fingerprint_rules():
    assert fingerprint(rows((1,), (2,))) == fingerprint(rows((2,), (1,)))
    assert fingerprint(rows((1,))) != fingerprint(rows((2,)))
    e1 = ExecutionResult.error(ErrorKind.SYNTAX, "near x")
    e2 = ExecutionResult.error(ErrorKind.SYNTAX, "near y")
    assert fingerprint(e1) == fingerprint(e2)
    assert fingerprint(e1) != fingerprint(ExecutionResult.error(ErrorKind.RUNTIME, "near x"))
    assert is_error_fingerprint(fingerprint(e1))
    assert is_error_fingerprint(fingerprint(ExecutionResult(Outcome.TIMEOUT)))
    assert not is_error_fingerprint(fingerprint(rows((1,))))


_values = st.one_of(st.none(), st.integers(-5, 5), st.sampled_from([0.5, 1.0, 2.25, 1e-7]), st.sampled_from(["a", "b", ""]))
_row_lists = st.lists(st.tuples(_values, _values), max_size=6)


@settings(max_examples=200, deadline=None)
@given(a=_row_lists, b=_row_lists, perm=st.randoms())
def test_match_and_fingerprint_agree(a, b, perm):
    ra = rows(*a) if a else ExecutionResult(Outcome.ROWS, rows=())
    rb = rows(*b) if b else ExecutionResult(Outcome.ROWS, rows=())
    shuffled = list(a)
    perm.shuffle(shuffled)
    rs = rows(*shuffled) if shuffled else ExecutionResult(Outcome.ROWS, rows=())
    assert results_match(rs, ra) and results_match(ra, rs)
    assert results_match(ra, rb) == (fingerprint(ra) == fingerprint(rb))


def test_corpus_results_have_distinct_fingerprints(toy_paths):
    # fingerprints of differing corpus results must not collide
    seen = {}
    for entry in toy_tasks():
        result = execute(entry["SQL"], toy_paths[entry["db_id"]])
        assert result.ok, entry["SQL"]
        for other in seen.get(fingerprint(result), []):
            assert results_match(result, other)
        seen.setdefault(fingerprint(result), []).append(result)


def test_format_tsv(tiny_db):
    assert format_tsv(execute("SELECT a, b FROM t WHERE a < 3 ORDER BY a", tiny_db)) == "a\tb\n1\tx\n2\ty"
    assert format_tsv(execute("SELECT c FROM t WHERE a = 3", tiny_db)) == "c\nNULL"
    assert format_tsv(execute("SELECT nope FROM t", tiny_db)).startswith("Error\tMissingEntity")

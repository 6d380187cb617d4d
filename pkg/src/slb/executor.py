"""Read-only SQL execution against SQLite files, result comparison, and result fingerprints."""

from __future__ import annotations

import enum
import hashlib
import re
import sqlite3
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

DEFAULT_TIMEOUT = 30.0
FLOAT_SIG_DIGITS = 6
# results beyond this many rows are treated as runaway queries
MAX_ROWS = 1_000_000
_FETCH_CHUNK = 10_000
# progress handler granularity, in SQLite VM instructions
_PROGRESS_STEPS = 1000

_ALLOWED_LEADING = ("select", "with", "values")


class Outcome(str, enum.Enum):
    ROWS = "Rows"
    ERROR = "Error"
    TIMEOUT = "Timeout"


class ErrorKind(str, enum.Enum):
    SYNTAX = "Syntax"
    MISSING_ENTITY = "MissingEntity"
    RUNTIME = "Runtime"


class GoldExecutionFailed(Exception):
    pass


@dataclass(frozen=True)
class ExecutionResult:
    outcome: Outcome
    rows: tuple[tuple[Any, ...], ...] | None = None
    columns: tuple[str, ...] = ()
    error_kind: ErrorKind | None = None
    message: str = ""
    elapsed: float = field(default=0.0, compare=False)

    def __post_init__(self) -> None:
        has_rows = self.rows is not None
        has_error = self.error_kind is not None
        if has_rows != (self.outcome is Outcome.ROWS) or has_error != (self.outcome is Outcome.ERROR):
            raise ValueError(f"payload does not match outcome {self.outcome}")

    @property
    def ok(self) -> bool:
        return self.outcome is Outcome.ROWS

    @classmethod
    def error(cls, kind: ErrorKind, message: str, elapsed: float = 0.0) -> "ExecutionResult":
        return cls(Outcome.ERROR, error_kind=kind, message=message, elapsed=elapsed)


def _normalize_value(value: Any) -> Any:
    if isinstance(value, float) and value.is_integer():
        return int(value)
    return value


def classify_error(message: str) -> ErrorKind:
    msg = message.lower()
    if "syntax error" in msg or "incomplete input" in msg or "unrecognized token" in msg:
        return ErrorKind.SYNTAX
    if msg.startswith(("no such column", "no such table", "no such function")):
        return ErrorKind.MISSING_ENTITY
    return ErrorKind.RUNTIME


_LEADING_COMMENT = re.compile(r"^\s*(?:--[^\n]*(?:\n|$)|/\*.*?\*/)", re.S)


# leading keywords of every statement SQLite accepts
_STATEMENT_VERBS = frozenset(
    "ALTER ANALYZE ATTACH BEGIN COMMIT CREATE DELETE DETACH DROP END EXPLAIN INSERT PRAGMA "
    "REINDEX RELEASE REPLACE ROLLBACK SAVEPOINT SELECT UPDATE VACUUM VALUES WITH".split()
)


def _strip_comments(sql: str) -> str:
    text = sql
    while True:
        stripped = _LEADING_COMMENT.sub("", text, count=1)
        if stripped == text:
            return text
        text = stripped


def is_read_statement(sql: str) -> bool:
    text = _strip_comments(sql).lstrip().lstrip("(").lower()
    return text.startswith(_ALLOWED_LEADING)


_READ_ACTIONS = {
    sqlite3.SQLITE_SELECT,
    sqlite3.SQLITE_READ,
    sqlite3.SQLITE_FUNCTION,
    getattr(sqlite3, "SQLITE_RECURSIVE", 33),
}


def _authorizer(action, *_args):
    return sqlite3.SQLITE_OK if action in _READ_ACTIONS else sqlite3.SQLITE_DENY


def connect_readonly(db_path: str | Path) -> sqlite3.Connection:
    path = Path(db_path).resolve()
    conn = sqlite3.connect(f"{path.as_uri()}?mode=ro", uri=True, check_same_thread=False)
    conn.text_factory = lambda b: b.decode("utf-8", errors="replace")
    return conn


def run_on_connection(conn: sqlite3.Connection, sql: str, timeout: float = DEFAULT_TIMEOUT,
                      max_rows: int = MAX_ROWS) -> ExecutionResult:
    """Execute ``sql`` on an open connection with write denial and a deadline."""
    start = time.monotonic()
    if not sql or not sql.strip():
        return ExecutionResult.error(ErrorKind.SYNTAX, "empty statement")
    if not is_read_statement(sql):
        head = _strip_comments(sql).lstrip().split(None, 1)
        if not head or head[0].upper().rstrip(";") not in _STATEMENT_VERBS:
            return ExecutionResult.error(ErrorKind.SYNTAX, f"unrecognized statement near {head[0][:20] if head else ''!r}")
        return ExecutionResult.error(ErrorKind.RUNTIME, "only read-only queries are allowed")
    deadline = start + timeout
    timed_out = False

    def progress() -> int:
        nonlocal timed_out
        if time.monotonic() > deadline:
            timed_out = True
            return 1
        return 0

    conn.set_authorizer(_authorizer)
    conn.set_progress_handler(progress, _PROGRESS_STEPS)
    try:
        cursor = conn.execute(sql)
        fetched: list[tuple] = []
        while True:
            chunk = cursor.fetchmany(_FETCH_CHUNK)
            if not chunk:
                break
            fetched.extend(tuple(_normalize_value(v) for v in row) for row in chunk)
            if len(fetched) > max_rows:
                return ExecutionResult.error(
                    ErrorKind.RUNTIME, f"result exceeds {max_rows} rows", time.monotonic() - start
                )
        rows = tuple(fetched)
        columns = tuple(d[0] for d in cursor.description or ())
    except (sqlite3.Error, sqlite3.Warning, OverflowError, ValueError) as exc:
        elapsed = time.monotonic() - start
        if timed_out:
            return ExecutionResult(Outcome.TIMEOUT, message=f"exceeded {timeout}s", elapsed=elapsed)
        message = str(exc)
        if "not authorized" in message:
            message = f"statement rejected (read-only): {message}"
        return ExecutionResult.error(classify_error(message), message, elapsed)
    finally:
        conn.set_progress_handler(None, _PROGRESS_STEPS)
        conn.set_authorizer(None)
    return ExecutionResult(Outcome.ROWS, rows=rows, columns=columns, elapsed=time.monotonic() - start)


def execute(sql: str, db_path: str | Path, timeout: float = DEFAULT_TIMEOUT, max_rows: int = MAX_ROWS) -> ExecutionResult:
    """Run ``sql`` read-only against the SQLite file at ``db_path``.

    Never raises for query problems: syntax errors, missing tables or columns,
    write attempts, and deadline overruns are all encoded in the result.
    """
    try:
        conn = connect_readonly(db_path)
    except sqlite3.Error as exc:
        return ExecutionResult.error(ErrorKind.RUNTIME, f"cannot open {db_path}: {exc}")
    try:
        return run_on_connection(conn, sql, timeout, max_rows)
    finally:
        conn.close()


# ---------------------------------------------------------------------------
# comparison


def _canonical(value: Any) -> str:
    if value is None:
        return "n:"
    if isinstance(value, bool):
        return f"i:{int(value)}"
    if isinstance(value, int):
        return f"i:{value}"
    if isinstance(value, float):
        rounded = float(f"{value:.{FLOAT_SIG_DIGITS}g}")
        if rounded.is_integer():
            return f"i:{int(rounded)}"
        return f"f:{rounded!r}"
    if isinstance(value, bytes):
        return f"b:{value.hex()}"
    return f"s:{value}"


def canonical_rows(rows) -> Counter:
    return Counter(tuple(_canonical(v) for v in row) for row in rows)


def results_match(predicted: ExecutionResult, gold: ExecutionResult, mode: str = "multiset") -> bool:
    """Order-insensitive comparison of whole result rows.

    ``mode`` is ``"multiset"`` (row multiplicity matters) or ``"set"``.
    Column names are not compared.
    """
    if gold.outcome is not Outcome.ROWS:
        raise GoldExecutionFailed(gold.message or gold.outcome.value)
    if predicted.outcome is not Outcome.ROWS:
        return False
    pred, ref = canonical_rows(predicted.rows), canonical_rows(gold.rows)
    if mode == "multiset":
        return pred == ref
    if mode == "set":
        return set(pred) == set(ref)
    raise ValueError(f"unknown comparison mode {mode!r}")


def fingerprint(result: ExecutionResult) -> str:
    """Digest that is equal for any two results ``results_match`` considers equal.

    Errors hash by kind only, so differently worded errors of the same kind
    cluster together.
    """
    if result.outcome is Outcome.ERROR:
        payload = f"error:{result.error_kind.value}"
    elif result.outcome is Outcome.TIMEOUT:
        payload = "timeout"
    else:
        lines = sorted("\x1f".join(row) + f"\x1e{n}" for row, n in canonical_rows(result.rows).items())
        payload = "rows:" + "\x1d".join(lines)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def is_error_fingerprint(digest: str) -> bool:
    return digest in _ERROR_DIGESTS


_ERROR_DIGESTS = frozenset(
    hashlib.sha256(p.encode("utf-8")).hexdigest()
    for p in ["timeout"] + [f"error:{k.value}" for k in ErrorKind]
)


def format_tsv(result: ExecutionResult) -> str:
    if not result.ok:
        label = result.error_kind.value if result.error_kind else result.outcome.value
        return f"{result.outcome.value}\t{label}\t{result.message}"
    lines = ["\t".join(result.columns)]
    for row in result.rows:
        lines.append("\t".join("NULL" if v is None else str(v) for v in row))
    return "\n".join(lines)

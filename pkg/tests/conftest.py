import hashlib
import sqlite3
from pathlib import Path

import pytest

from slb.bench import load_dataset, padding_schemas
from slb.pipeline import QueryTask
from slb.schema import Column, Schema, Table, load_schema
from slb.toy import TOY_DATABASES, build_toy_dataset


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory) -> Path:
    return build_toy_dataset(tmp_path_factory.mktemp("toy"))


@pytest.fixture(scope="session")
def toy_schemas(toy_root) -> dict[str, Schema]:
    out = {}
    for db in TOY_DATABASES:
        folder = toy_root / "dev_databases" / db
        out[db] = load_schema(folder / f"{db}.sqlite", folder / "database_description")
    return out


@pytest.fixture(scope="session")
def toy_paths(toy_root) -> dict[str, Path]:
    return {db: toy_root / "dev_databases" / db / f"{db}.sqlite" for db in TOY_DATABASES}


@pytest.fixture()
def toy_index(toy_root):
    index = load_dataset(toy_root)
    index.padding = padding_schemas(3000)
    return index


@pytest.fixture()
def tiny_db(tmp_path) -> Path:
    """Two small tables ``t(a, b, c)`` and ``u(id, t_a, v)``."""
    path = tmp_path / "tiny.sqlite"
    conn = sqlite3.connect(path)
    conn.executescript(
        """
        CREATE TABLE t (a INTEGER PRIMARY KEY, b TEXT, c REAL);
        CREATE TABLE u (id INTEGER PRIMARY KEY, t_a INTEGER REFERENCES t(a), v TEXT);
        INSERT INTO t VALUES (1, 'x', 1.5), (2, 'y', 2.5), (3, 'x', NULL);
        INSERT INTO u VALUES (10, 1, 'p'), (11, 1, 'q'), (12, 3, 'r');
        """
    )
    conn.commit()
    conn.close()
    return path


@pytest.fixture()
def tiny_schema(tiny_db) -> Schema:
    return load_schema(tiny_db)


def make_schema(db_id: str, tables: dict[str, list[str]]) -> Schema:
    return Schema(
        db_id,
        tuple(Table(name, tuple(Column(c, "TEXT", f"the {c} value") for c in cols)) for name, cols in tables.items()),
    )


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def task(task_id="1", db_id="tiny", question="How many rows are in t?", hint="", gold="SELECT COUNT(a) FROM t"):
    return QueryTask(task_id, db_id, question, hint, gold)


# -- acceptance reporting: one line per criterion in the terminal summary ----

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        note = ""
        if report.outcome == "skipped" and isinstance(report.longrepr, tuple):
            note = report.longrepr[2]
        _ACCEPTANCE[number] = (status, title, note)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, note = _ACCEPTANCE[number]
        line = f"criterion {number:>2}: {status}  {title}"
        if note:
            line += f"  ({note})"
        terminalreporter.write_line(line)

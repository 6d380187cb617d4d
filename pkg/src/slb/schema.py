"""Database schema model: loading BIRD-style SQLite assets and rendering them as DDL."""

from __future__ import annotations

import csv
import io
import logging
import re
import sqlite3
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

logger = logging.getLogger(__name__)

MAX_SAMPLE_VALUES = 3
# bounds the scan when a column is dominated by one repeated value
_SAMPLE_SCAN_LIMIT = 10_000
_SAMPLE_MAX_CHARS = 100


class SchemaError(Exception):
    pass


class UnreadableDatabase(SchemaError):
    pass


class MalformedDescriptions(SchemaError):
    def __init__(self, path: Path | str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = Path(path)


class EmptySubset(SchemaError):
    pass


class UnknownColumn(SchemaError):
    pass


@dataclass(frozen=True, order=True)
class ColumnRef:
    """Canonical (database, table, column) identity.

    Table and column names are stored lowercased; comparison and hashing are
    therefore case-insensitive. Original casing lives on :class:`Column`.
    """

    db_id: str
    table_name: str
    column_name: str

    def __post_init__(self) -> None:
        if not (self.db_id and self.table_name and self.column_name):
            raise ValueError(f"ColumnRef fields must be non-empty: {self!r}")
        object.__setattr__(self, "table_name", self.table_name.lower())
        object.__setattr__(self, "column_name", self.column_name.lower())

    @property
    def qualified(self) -> str:
        return f"{self.table_name}.{self.column_name}"

    def __str__(self) -> str:
        return self.qualified


@dataclass(frozen=True)
class Column:
    name: str
    declared_type: str = ""
    description: str = ""
    expanded_description: str = ""
    sample_values: tuple[str, ...] = ()
    is_primary_key: bool = False
    fk_target: ColumnRef | None = None


@dataclass(frozen=True)
class Table:
    name: str
    columns: tuple[Column, ...]

    def __post_init__(self) -> None:
        if not self.columns:
            raise SchemaError(f"table {self.name!r} has no columns")
        seen: set[str] = set()
        for col in self.columns:
            key = col.name.lower()
            if key in seen:
                raise SchemaError(f"duplicate column {col.name!r} in table {self.name!r}")
            seen.add(key)

    def column(self, name: str) -> Column | None:
        name = name.lower()
        for col in self.columns:
            if col.name.lower() == name:
                return col
        return None


@dataclass(frozen=True)
class Schema:
    db_id: str
    tables: tuple[Table, ...]
    _index: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self) -> None:
        index: dict[str, Table] = {}
        for table in self.tables:
            key = table.name.lower()
            if key in index:
                raise SchemaError(f"duplicate table {table.name!r} in {self.db_id!r}")
            index[key] = table
        if not self.tables:
            raise SchemaError(f"schema {self.db_id!r} has no columns")
        object.__setattr__(self, "_index", index)
        for table in self.tables:
            for col in table.columns:
                if col.fk_target is not None and self.lookup(col.fk_target) is None:
                    raise SchemaError(
                        f"{table.name}.{col.name} references missing column {col.fk_target}"
                    )

    def table(self, name: str) -> Table | None:
        return self._index.get(name.lower())

    def lookup(self, ref: ColumnRef) -> Column | None:
        table = self.table(ref.table_name)
        return table.column(ref.column_name) if table is not None else None

    def ref(self, table: str, column: str) -> ColumnRef:
        return ColumnRef(self.db_id, table, column)

    @property
    def column_count(self) -> int:
        return sum(len(t.columns) for t in self.tables)

    def with_expanded_descriptions(self, expansions: Mapping[ColumnRef, str]) -> "Schema":
        """Copy of the schema with ``expanded_description`` filled from ``expansions``."""
        if not expansions:
            return self
        tables = []
        for table in self.tables:
            cols = []
            for col in table.columns:
                text = expansions.get(self.ref(table.name, col.name))
                cols.append(replace(col, expanded_description=text) if text else col)
            tables.append(replace(table, columns=tuple(cols)))
        return Schema(self.db_id, tuple(tables))


def schema_columns(schema: Schema) -> list[ColumnRef]:
    """Every column of ``schema``, table-major in declaration order."""
    return [schema.ref(t.name, c.name) for t in schema.tables for c in t.columns]


# ---------------------------------------------------------------------------
# loading


def _connect_readonly(db_path: Path) -> sqlite3.Connection:
    if not db_path.is_file():
        raise UnreadableDatabase(f"no database file at {db_path}")
    try:
        conn = sqlite3.connect(f"{db_path.resolve().as_uri()}?mode=ro", uri=True)
        conn.execute("SELECT name FROM sqlite_master LIMIT 1").fetchall()
    except sqlite3.DatabaseError as exc:
        raise UnreadableDatabase(f"{db_path}: {exc}") from exc
    conn.text_factory = lambda b: b.decode("utf-8", errors="replace")
    return conn


def _quote_ident(name: str) -> str:
    return '"' + name.replace('"', '""') + '"'


def _sample_values(conn: sqlite3.Connection, table: str, column: str) -> tuple[str, ...]:
    col, tab = _quote_ident(column), _quote_ident(table)
    base = f"SELECT {col} FROM {tab} WHERE {col} IS NOT NULL"
    try:
        cursor = conn.execute(base + " ORDER BY rowid")
    except sqlite3.OperationalError:
        # WITHOUT ROWID tables
        cursor = conn.execute(base)
    values: list[str] = []
    for i, (value,) in enumerate(cursor):
        if i >= _SAMPLE_SCAN_LIMIT:
            break
        text = value.hex() if isinstance(value, bytes) else str(value)
        text = text[:_SAMPLE_MAX_CHARS]
        if text not in values:
            values.append(text)
            if len(values) == MAX_SAMPLE_VALUES:
                break
    return tuple(values)


def _read_description_file(path: Path) -> dict[str, str]:
    raw = path.read_bytes()
    for encoding in ("utf-8-sig", "cp1252", "latin-1"):
        try:
            text = raw.decode(encoding)
            break
        except UnicodeDecodeError:
            continue
    try:
        reader = csv.reader(io.StringIO(text))
        rows = list(reader)
    except csv.Error as exc:
        raise MalformedDescriptions(path, str(exc)) from exc
    if not rows:
        return {}
    header = [h.strip().lower() for h in rows[0]]
    if "original_column_name" not in header:
        raise MalformedDescriptions(path, "missing 'original_column_name' header")
    name_idx = header.index("original_column_name")
    desc_idx = header.index("column_description") if "column_description" in header else None
    out: dict[str, str] = {}
    for row in rows[1:]:
        if len(row) <= name_idx or not row[name_idx].strip():
            continue
        desc = ""
        if desc_idx is not None and desc_idx < len(row):
            desc = row[desc_idx].strip()
        out[row[name_idx].strip().lower()] = desc
    return out


def _load_descriptions(descriptions_dir: Path) -> dict[str, dict[str, str]]:
    if not descriptions_dir.is_dir():
        raise MalformedDescriptions(descriptions_dir, "not a directory")
    found: dict[str, dict[str, str]] = {}
    for path in sorted(descriptions_dir.glob("*.csv")):
        found[path.stem.strip().lower()] = _read_description_file(path)
    return found


def load_schema(db_path: str | Path, descriptions_dir: str | Path | None = None) -> Schema:
    """Load a SQLite database file into a :class:`Schema`.

    Tables and columns keep their declaration order. Descriptions from a BIRD
    ``database_description`` folder are merged by table file name and
    ``original_column_name``; anything missing becomes an empty string.
    Foreign keys pointing at nonexistent columns (common in BIRD) are dropped.
    """
    db_path = Path(db_path)
    descriptions = _load_descriptions(Path(descriptions_dir)) if descriptions_dir else {}
    conn = _connect_readonly(db_path)
    try:
        table_names = [
            row[0]
            for row in conn.execute(
                "SELECT name FROM sqlite_master WHERE type = 'table' "
                "AND name NOT LIKE 'sqlite_%' ORDER BY rowid"
            )
        ]
        db_id = db_path.stem
        raw_tables = []
        for tname in table_names:
            info = conn.execute(f"PRAGMA table_info({_quote_ident(tname)})").fetchall()
            pk_cols = {row[1].lower() for row in info if row[5]}
            fks = {}
            for fk in conn.execute(f"PRAGMA foreign_key_list({_quote_ident(tname)})"):
                fks.setdefault(fk[3].lower(), (fk[2], fk[4]))
            raw_tables.append((tname, info, pk_cols, fks))

        declared = {t[0].lower(): {row[1].lower() for row in t[1]} for t in raw_tables}
        primary = {t[0].lower(): sorted(t[2]) for t in raw_tables}

        def resolve_fk(target_table: str, target_col: str | None) -> ColumnRef | None:
            cols = declared.get(target_table.lower())
            if cols is None:
                return None
            if target_col is None:
                pk = primary[target_table.lower()]
                if len(pk) != 1:
                    return None
                target_col = pk[0]
            if target_col.lower() not in cols:
                return None
            return ColumnRef(db_id, target_table, target_col)

        tables = []
        for tname, info, pk_cols, fks in raw_tables:
            descs = descriptions.get(tname.lower(), {})
            columns = []
            for row in info:
                cname, ctype = row[1], row[2] or ""
                fk = None
                if cname.lower() in fks:
                    fk = resolve_fk(*fks[cname.lower()])
                    if fk is None:
                        logger.warning("dropping dangling foreign key %s.%s", tname, cname)
                columns.append(
                    Column(
                        name=cname,
                        declared_type=ctype,
                        description=descs.get(cname.lower(), ""),
                        sample_values=_sample_values(conn, tname, cname),
                        is_primary_key=cname.lower() in pk_cols,
                        fk_target=fk,
                    )
                )
            if columns:
                tables.append(Table(tname, tuple(columns)))
    finally:
        conn.close()
    return Schema(db_id, tuple(tables))


# ---------------------------------------------------------------------------
# rendering

_PLAIN_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")

SQLITE_KEYWORDS = frozenset(
    """
    abort action add after all alter always analyze and as asc attach autoincrement
    before begin between by cascade case cast check collate column commit conflict
    constraint create cross current current_date current_time current_timestamp
    database default deferrable deferred delete desc detach distinct do drop each
    else end escape except exclude exclusive exists explain fail filter first
    following for foreign from full generated glob group groups having if ignore
    immediate in index indexed initially inner insert instead intersect into is
    isnull join key last left like limit match materialized natural no not nothing
    notnull null nulls of offset on or order others outer over partition plan pragma
    preceding primary query raise range recursive references regexp reindex release
    rename replace restrict returning right rollback row rows savepoint select set
    table temp temporary then ties to transaction trigger unbounded union unique
    update using vacuum values view virtual when where window with without
    """.split()
)


def quote_identifier(name: str) -> str:
    """Quote ``name`` with backticks when it is not a plain, non-reserved identifier."""
    if _PLAIN_IDENT.match(name) and name.lower() not in SQLITE_KEYWORDS:
        return name
    return "`" + name.replace("`", "``") + "`"


def _comment_text(text: str) -> str:
    return " ".join(text.split())


def _quote_sample(value: str) -> str:
    return "'" + _comment_text(value).replace("'", "''") + "'"


def render_schema(
    schema: Schema,
    subset: Iterable[ColumnRef],
    include_descriptions: bool = True,
    include_samples: bool = False,
) -> str:
    """Render the ``subset`` columns of ``schema`` as CREATE TABLE statements.

    Only tables owning at least one subset column appear, and only subset
    columns appear within them, all in declaration order. Foreign keys are
    rendered only when both ends are in the subset.
    """
    wanted = set(subset)
    if not wanted:
        raise EmptySubset("cannot render an empty column subset")
    for ref in wanted:
        if ref.db_id != schema.db_id or schema.lookup(ref) is None:
            raise UnknownColumn(f"{ref.db_id}:{ref} is not a column of {schema.db_id}")

    blocks = []
    for table in schema.tables:
        cols = [c for c in table.columns if schema.ref(table.name, c.name) in wanted]
        if not cols:
            continue
        pk = [c for c in cols if c.is_primary_key]
        inline_pk = len([c for c in table.columns if c.is_primary_key]) == 1
        lines: list[tuple[str, str]] = []
        for col in cols:
            line = quote_identifier(col.name)
            if col.declared_type:
                line += f" {col.declared_type}"
            if col.is_primary_key and inline_pk:
                line += " PRIMARY KEY"
            notes = []
            desc = col.expanded_description or col.description
            if include_descriptions and desc:
                notes.append(_comment_text(desc))
            if include_samples and col.sample_values:
                notes.append("examples: " + ", ".join(_quote_sample(v) for v in col.sample_values))
            lines.append((line, "; ".join(notes)))
        if pk and not inline_pk:
            lines.append((f"PRIMARY KEY ({', '.join(quote_identifier(c.name) for c in pk)})", ""))
        for col in cols:
            target = col.fk_target
            if target is None or target not in wanted:
                continue
            target_table = schema.table(target.table_name)
            target_col = schema.lookup(target)
            lines.append(
                (
                    f"FOREIGN KEY ({quote_identifier(col.name)}) REFERENCES "
                    f"{quote_identifier(target_table.name)}({quote_identifier(target_col.name)})",
                    "",
                )
            )
        body = []
        for i, (line, note) in enumerate(lines):
            sep = "," if i < len(lines) - 1 else ""
            body.append(f"  {line}{sep}" + (f" -- {note}" if note else ""))
        blocks.append(f"CREATE TABLE {quote_identifier(table.name)} (\n" + "\n".join(body) + "\n);")
    return "\n\n".join(blocks)

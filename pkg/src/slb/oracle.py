"""Required-column extraction for SQL queries.

Two independent routes compute the set of schema columns a query reads:

* :func:`extract_required_columns` parses the query (sqlglot, SQLite dialect)
  and binds every column reference with SQLite's scoping rules.
* :func:`column_drop_oracle` renames each schema column in turn on an
  in-memory copy of the database and watches whether the query breaks or
  its result changes.

Star semantics follow what is observable: a column pulled in by ``*`` is
required when its name reaches the final result header or is referenced by
an enclosing query. Explicitly written references are always required, since
SQLite rejects the statement when they are missing. CTEs are resolved only
when referenced, matching SQLite, which never compiles unused CTEs.
"""

from __future__ import annotations

import sqlite3
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import sqlglot
from sqlglot import exp
from sqlglot.errors import ParseError as SqlglotParseError
from sqlglot.errors import TokenError

from .executor import DEFAULT_TIMEOUT, ExecutionResult, canonical_rows, run_on_connection
from .schema import ColumnRef, Schema, Table, schema_columns

_ROWID_NAMES = frozenset({"rowid", "oid", "_rowid_"})
_SET_OPS = (exp.Union, exp.Intersect, exp.Except)


class OracleError(Exception):
    pass


class ParseError(OracleError):
    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        where = f" (line {line}, col {col})" if line is not None else ""
        super().__init__(message + where)
        self.line = line
        self.col = col


class AmbiguousColumn(OracleError):
    pass


class BaselineExecutionFailed(OracleError):
    pass


@dataclass
class ColumnDependencySet:
    refs: set[ColumnRef] = field(default_factory=set)
    unresolved: list[str] = field(default_factory=list)
    # base tables the query reads, even when no column of them is required
    tables: set[str] = field(default_factory=set)

    def sorted_refs(self) -> list[ColumnRef]:
        return sorted(self.refs)


# ---------------------------------------------------------------------------
# scopes


@dataclass
class _Output:
    name: str
    # refs that become required only if this output is observed
    lazy: frozenset[ColumnRef] = frozenset()


@dataclass
class _Source:
    visible: str
    table: Table | None = None
    outputs: list[_Output] | None = None
    hidden: set[str] = field(default_factory=set)

    def has(self, name: str) -> bool:
        if self.table is not None:
            return self.table.column(name) is not None
        return any(o.name == name for o in self.outputs)

    def names(self) -> list[str]:
        if self.table is not None:
            return [c.name.lower() for c in self.table.columns]
        return [o.name for o in self.outputs]


@dataclass
class _Scope:
    sources: list[_Source]
    parent: "_Scope | None"
    aliases: set[str] = field(default_factory=set)
    alias_ok: bool = False


@dataclass
class _CteDef:
    node: exp.Expression
    columns: list[str]
    env: "_CteEnv"
    outputs: list[_Output] | None = None
    provisional: list[_Output] | None = None
    resolving: bool = False


class _CteEnv:
    def __init__(self, parent: "_CteEnv | None" = None):
        self.parent = parent
        self.defs: dict[str, _CteDef] = {}

    def find(self, name: str) -> _CteDef | None:
        env = self
        while env is not None:
            if name in env.defs:
                return env.defs[name]
            env = env.parent
        return None


def _arg(node: exp.Expression, name: str):
    value = node.args.get(name + "_")
    return value if value is not None else node.args.get(name)


def _output_name(expr: exp.Expression, sql: str) -> str:
    if isinstance(expr, exp.Alias):
        return expr.alias.lower()
    if isinstance(expr, exp.Column) and not isinstance(expr.this, exp.Star):
        return expr.name.lower()
    return expr.sql(dialect="sqlite").lower()


class _Resolver:
    def __init__(self, sql: str, schema: Schema):
        self.sql = sql
        self.schema = schema
        self.refs: set[ColumnRef] = set()
        self.tables: set[str] = set()
        self.unresolved: list[str] = []

    # -- entry --------------------------------------------------------------

    def run(self, tree: exp.Expression) -> None:
        outputs = self.query(tree, None, _CteEnv())
        for out in outputs:
            self.refs |= out.lazy

    # -- queries ------------------------------------------------------------

    def query(self, node: exp.Expression, outer: _Scope | None, ctes: _CteEnv) -> list[_Output]:
        while isinstance(node, (exp.Subquery, exp.Paren)) and not _arg(node, "with"):
            node = node.this
        ctes = self._register_ctes(node, ctes)
        if isinstance(node, exp.Subquery):
            return self.query(node.this, outer, ctes)
        if isinstance(node, _SET_OPS):
            left = self.query(node.this, outer, ctes)
            self.query(node.expression, outer, ctes)
            self._walk_tail(node, outer, ctes)
            return left
        if isinstance(node, exp.Select):
            return self.select(node, outer, ctes)
        if isinstance(node, exp.Values):
            return [_Output(f"column{i + 1}") for i in range(len(node.expressions[0].expressions))]
        raise ParseError(f"unsupported statement type {type(node).__name__}")

    def _register_ctes(self, node: exp.Expression, ctes: _CteEnv) -> _CteEnv:
        with_ = _arg(node, "with")
        if not with_:
            return ctes
        env = _CteEnv(ctes)
        for cte in with_.expressions:
            cols = [c.name.lower() for c in (cte.args["alias"].columns or [])]
            env.defs[cte.alias.lower()] = _CteDef(cte.this, cols, env)
        return env

    def _walk_tail(self, node: exp.Expression, outer: _Scope | None, ctes: _CteEnv) -> None:
        # LIMIT/OFFSET of compound queries; compound ORDER BY terms name result columns
        for key in ("limit", "offset"):
            part = node.args.get(key)
            if part is not None:
                self.walk(part, _Scope([], outer), ctes)

    def _cte_outputs(self, name: str, cte: _CteDef) -> list[_Output]:
        if cte.outputs is not None:
            return cte.outputs
        if cte.resolving:
            if cte.provisional is not None:
                return cte.provisional
            if cte.columns:
                return [_Output(c) for c in cte.columns]
            raise ParseError(f"recursive CTE {name!r} referenced before its anchor")
        cte.resolving = True
        body = cte.node
        if isinstance(body, _SET_OPS):
            left = self.query(body.this, None, cte.env)
            cte.provisional = self._rename(left, cte.columns)
            self.query(body.expression, None, cte.env)
            self._walk_tail(body, None, cte.env)
            outputs = left
        else:
            outputs = self.query(body, None, cte.env)
        cte.resolving = False
        cte.outputs = self._rename(outputs, cte.columns)
        return cte.outputs

    @staticmethod
    def _rename(outputs: list[_Output], names: list[str]) -> list[_Output]:
        if not names:
            return outputs
        return [_Output(n, o.lazy) for n, o in zip(names, outputs)]

    # -- FROM ---------------------------------------------------------------

    def _source(self, node: exp.Expression, ctes: _CteEnv, outer: _Scope | None) -> _Source:
        alias = node.args.get("alias")
        alias_name = alias.name.lower() if alias is not None and alias.name else None
        alias_cols = [c.name.lower() for c in alias.columns] if alias is not None and alias.columns else []
        if isinstance(node, exp.Table):
            if not isinstance(node.this, exp.Identifier):
                raise ParseError(f"unsupported table expression {node.sql()}")
            name = node.name.lower()
            cte = ctes.find(name) if not node.args.get("db") else None
            if cte is not None:
                outputs = self._rename(self._cte_outputs(name, cte), alias_cols)
                return _Source(alias_name or name, outputs=outputs)
            table = self.schema.table(name)
            if table is None:
                raise ParseError(
                    f"table or view {node.name!r} is not in schema {self.schema.db_id!r} "
                    "(views are not supported)"
                )
            self.tables.add(table.name.lower())
            return _Source(alias_name or name, table=table)
        if isinstance(node, exp.Subquery):
            # FROM subqueries see enclosing queries but not their sibling FROM items
            outputs = self._rename(self.query(node.this, outer, ctes), alias_cols)
            return _Source(alias_name or "", outputs=outputs)
        raise ParseError(f"unsupported FROM item {node.sql()}")

    def _require(self, source: _Source, name: str) -> None:
        if source.table is not None:
            col = source.table.column(name)
            self.refs.add(self.schema.ref(source.table.name, col.name))
        else:
            for out in source.outputs:
                if out.name == name:
                    self.refs |= out.lazy
                    return

    def _join_shared(self, left: list[_Source], right: _Source, names: list[str]) -> None:
        for name in names:
            owner = next((s for s in left if s.has(name) and name not in s.hidden), None)
            if owner is None or not right.has(name):
                self.unresolved.append(name)
                continue
            self._require(owner, name)
            self._require(right, name)
            right.hidden.add(name)

    def from_clause(self, select: exp.Select, scope: _Scope, ctes: _CteEnv) -> list[exp.Expression]:
        from_ = _arg(select, "from")
        ons = []
        if from_ is None:
            return ons
        items = [from_.this] + [e for e in (from_.expressions or [])]
        for item in items:
            scope.sources.append(self._source(item, ctes, scope.parent))
        for join in select.args.get("joins") or []:
            src = self._source(join.this, ctes, scope.parent)
            if join.args.get("using"):
                self._join_shared(scope.sources, src, [i.name.lower() for i in join.args["using"]])
            elif str(join.args.get("method") or "").upper() == "NATURAL":
                left_names = {n for s in scope.sources for n in s.names() if n not in s.hidden}
                shared = [n for n in src.names() if n in left_names]
                self._join_shared(scope.sources, src, shared)
            scope.sources.append(src)
            if join.args.get("on") is not None:
                ons.append(join.args["on"])
        return ons

    # -- SELECT -------------------------------------------------------------

    def select(self, select: exp.Select, outer: _Scope | None, ctes: _CteEnv) -> list[_Output]:
        scope = _Scope([], outer)
        ons = self.from_clause(select, scope, ctes)
        for on in ons:
            self.walk(on, scope, ctes)

        outputs: list[_Output] = []
        for item in select.expressions:
            if isinstance(item, exp.Star):
                for src in scope.sources:
                    outputs.extend(self._expand(src))
                continue
            if isinstance(item, exp.Column) and isinstance(item.this, exp.Star):
                qual = item.table.lower()
                src = next((s for s in scope.sources if s.visible == qual), None)
                if src is None:
                    self.unresolved.append(f"{item.table}.*")
                    continue
                outputs.extend(self._expand(src, include_hidden=True))
                continue
            self.walk(item, scope, ctes)
            rowid_alias = self._rowid_alias(item, scope)
            outputs.append(rowid_alias or _Output(_output_name(item, self.sql)))
            if isinstance(item, exp.Alias):
                scope.aliases.add(item.alias.lower())

        scope.alias_ok = True
        for key in ("where", "group", "having", "qualify"):
            part = select.args.get(key)
            if part is not None:
                self.walk(part, scope, ctes)
        order = select.args.get("order")
        if order is not None:
            for term in order.expressions:
                target = term.this
                if isinstance(target, exp.Column) and not target.table and target.name.lower() in scope.aliases:
                    continue
                if isinstance(target, exp.Literal) and not target.is_string:
                    continue
                self.walk(target, scope, ctes)
        for key in ("limit", "offset"):
            part = select.args.get(key)
            if part is not None:
                self.walk(part, scope, ctes)
        return outputs

    def _rowid_alias(self, item: exp.Expression, scope: _Scope) -> _Output | None:
        """A bare ``rowid`` whose table has an INTEGER PRIMARY KEY is reported under that
        column's name, which makes the key column visible in the result header."""
        if not isinstance(item, exp.Column) or item.name.lower() not in _ROWID_NAMES:
            return None
        qual = item.table.lower() if item.table else None
        cands = [s for s in scope.sources if s.table is not None and (qual is None or s.visible == qual)]
        if len(cands) != 1 or cands[0].table.column(item.name) is not None:
            return None
        table = cands[0].table
        pk = [c for c in table.columns if c.is_primary_key]
        if len(pk) != 1 or pk[0].declared_type.upper() != "INTEGER":
            return None
        return _Output(pk[0].name.lower(), frozenset({self.schema.ref(table.name, pk[0].name)}))

    def _expand(self, src: _Source, include_hidden: bool = False) -> list[_Output]:
        if src.table is not None:
            return [
                _Output(c.name.lower(), frozenset({self.schema.ref(src.table.name, c.name)}))
                for c in src.table.columns
                if include_hidden or c.name.lower() not in src.hidden
            ]
        return [o for o in src.outputs if include_hidden or o.name not in src.hidden]

    # -- expressions --------------------------------------------------------

    def walk(self, node: exp.Expression, scope: _Scope, ctes: _CteEnv) -> None:
        if isinstance(node, exp.Column):
            if isinstance(node.this, exp.Star):
                return
            self.bind(node, scope)
            return
        if isinstance(node, (exp.Select, exp.Subquery) + _SET_OPS):
            self.query(node, scope, ctes)
            return
        for child in node.iter_expressions():
            self.walk(child, scope, ctes)

    def _is_double_quoted(self, ident: exp.Expression) -> bool:
        start = ident.meta.get("start") if isinstance(ident, exp.Identifier) else None
        if start is None:
            return isinstance(ident, exp.Identifier) and ident.quoted
        return self.sql[start : start + 1] == '"'

    def bind(self, column: exp.Column, scope: _Scope) -> None:
        name = column.name.lower()
        qual = column.table.lower() if column.table else None
        current = scope
        while current is not None:
            if qual:
                src = next((s for s in current.sources if s.visible == qual), None)
                if src is not None:
                    if src.has(name):
                        self._require(src, name)
                    elif name not in _ROWID_NAMES:
                        self.unresolved.append(f"{column.table}.{column.name}")
                    return
            else:
                matches = [s for s in current.sources if s.has(name) and name not in s.hidden]
                if len(matches) > 1:
                    raise AmbiguousColumn(f"ambiguous column name: {column.name}")
                if matches:
                    self._require(matches[0], name)
                    return
                if current.alias_ok and name in current.aliases:
                    return
            current = current.parent
        if name in _ROWID_NAMES:
            return
        if not qual and self._is_double_quoted(column.this):
            return  # SQLite reads an unbindable "x" as the string literal 'x'
        self.unresolved.append(f"{column.table}.{column.name}" if qual else column.name)


def _parse(sql: str) -> exp.Expression:
    try:
        statements = [s for s in sqlglot.parse(sql, read="sqlite") if s is not None]
    except SqlglotParseError as exc:
        first = exc.errors[0] if exc.errors else {}
        raise ParseError(first.get("description", str(exc)), first.get("line"), first.get("col")) from exc
    except TokenError as exc:
        raise ParseError(str(exc)) from exc
    if len(statements) != 1:
        raise ParseError(f"expected exactly one statement, got {len(statements)}")
    tree = statements[0]
    if not isinstance(tree, (exp.Select, exp.Subquery, exp.Values) + _SET_OPS):
        raise ParseError(f"not a read query: {type(tree).__name__}")
    return tree


def extract_required_columns(sql: str, schema: Schema) -> ColumnDependencySet:
    """Return every schema column ``sql`` reads, bound against ``schema``."""
    resolver = _Resolver(sql, schema)
    resolver.run(_parse(sql))
    return ColumnDependencySet(resolver.refs, resolver.unresolved, resolver.tables)


def linking_targets(deps: ColumnDependencySet, schema: Schema) -> set[ColumnRef]:
    """Columns a linker must retrieve for the query to be answerable.

    A table read without any of its columns (``SELECT COUNT(*) FROM t``)
    contributes its first column so that the table itself reaches the prompt.
    """
    targets = set(deps.refs)
    covered = {r.table_name for r in deps.refs}
    for name in sorted(deps.tables - covered):
        table = schema.table(name)
        targets.add(schema.ref(table.name, table.columns[0].name))
    return targets


# ---------------------------------------------------------------------------
# brute-force verifier

Executor = Callable[[sqlite3.Connection, str], ExecutionResult]


def _default_executor(conn: sqlite3.Connection, sql: str) -> ExecutionResult:
    return run_on_connection(conn, sql, DEFAULT_TIMEOUT)


def _observed(result: ExecutionResult):
    return result.columns, canonical_rows(result.rows)


def column_drop_oracle(
    sql: str,
    schema: Schema,
    db_path: str | Path,
    executor: Executor = _default_executor,
) -> ColumnDependencySet:
    """Required columns found by renaming each column and re-running ``sql``.

    Column ``c`` is required iff the query fails, or returns a different
    header or row multiset, once ``c`` is renamed to a fresh name. Works on
    in-memory copies; the file at ``db_path`` is only read.
    """
    src = sqlite3.connect(f"{Path(db_path).resolve().as_uri()}?mode=ro", uri=True)
    try:
        base_conn = sqlite3.connect(":memory:")
        src.backup(base_conn)
    finally:
        src.close()
    try:
        baseline = executor(base_conn, sql)
        if not baseline.ok:
            raise BaselineExecutionFailed(baseline.message or baseline.outcome.value)
        expected = _observed(baseline)
        refs: set[ColumnRef] = set()
        for i, ref in enumerate(schema_columns(schema)):
            table = schema.table(ref.table_name)
            col = schema.lookup(ref)
            copy = sqlite3.connect(":memory:")
            try:
                base_conn.backup(copy)
                copy.execute(
                    f'ALTER TABLE "{table.name}" RENAME COLUMN "{col.name}" TO "__slb_renamed_{i}"'
                )
                result = executor(copy, sql)
            finally:
                copy.close()
            if not result.ok or _observed(result) != expected:
                refs.add(ref)
    finally:
        base_conn.close()
    return ColumnDependencySet(refs, [], {r.table_name for r in refs})

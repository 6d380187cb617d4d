"""Schema linkers: oracle-backed FPR mocking, full schema, SCSL, TCSL, and keyword hybrids."""

from __future__ import annotations

import enum
import json
import math
import random
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .llm import ChatProvider, ProviderError, last_fenced_block, user_request
from .prompts import load_template
from .schema import Column, ColumnRef, Schema, Table, quote_identifier, schema_columns


class LinkerError(Exception):
    pass


class InvalidRate(LinkerError):
    pass


class InsufficientColumns(LinkerError):
    pass


class Strategy(str, enum.Enum):
    FULL_SCHEMA = "FullSchema"
    MOCKED_FPR = "MockedFPR"
    SCSL = "SCSL"
    HYSCSL = "HySCSL"
    TCSL = "TCSL"
    HYTCSL = "HyTCSL"


_HYBRID = {Strategy.SCSL: Strategy.HYSCSL, Strategy.TCSL: Strategy.HYTCSL}


@dataclass
class LinkerOutput:
    retrieved: list[ColumnRef]
    strategy_id: Strategy
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.retrieved:
            raise LinkerError("linker output must retrieve at least one column")


@dataclass(frozen=True)
class TargetFPR:
    rate: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.rate < 1.0) or math.isnan(self.rate):
            raise InvalidRate(f"target FPR must lie in [0, 1), got {self.rate}")


def _ordered(refs: Iterable[ColumnRef], schema: Schema) -> list[ColumnRef]:
    wanted = set(refs)
    return [r for r in schema_columns(schema) if r in wanted]


# ---------------------------------------------------------------------------
# mocked linker


def irrelevant_count(rate: float, required: int) -> int:
    """Number of irrelevant columns that makes ``I / (required + I)`` closest to ``rate``."""
    exact = rate * required / (1.0 - rate)
    # the 1e-9 nudge absorbs float error such as 0.99*10/0.01 = 989.9999999999999
    return int(math.floor(exact + 0.5 + 1e-9))


def mock_link(
    required: Iterable[ColumnRef],
    schema: Schema,
    foreign_pool: Sequence[Schema],
    target: TargetFPR | float,
    rng: random.Random,
) -> LinkerOutput:
    """All ``required`` columns plus enough uniformly drawn irrelevant ones to hit ``target``.

    Irrelevant columns come from ``schema`` first; when it runs out they are
    drawn from ``foreign_pool``, skipping any column whose table name clashes
    with a target table or with a table of a different foreign database, or
    whose qualified name is already retrieved.
    """
    if not isinstance(target, TargetFPR):
        target = TargetFPR(float(target))
    required = set(required)
    if not required:
        raise LinkerError("mock_link needs at least one required column")
    if not all(r.db_id == schema.db_id and schema.lookup(r) is not None for r in required):
        raise LinkerError("required columns must belong to the target schema")

    n_irrelevant = irrelevant_count(target.rate, len(required))
    local = [r for r in schema_columns(schema) if r not in required]
    if n_irrelevant <= len(local):
        picked_local = rng.sample(local, n_irrelevant)
        foreign: list[ColumnRef] = []
    else:
        picked_local = local
        need = n_irrelevant - len(local)
        candidates = [r for s in foreign_pool if s.db_id != schema.db_id for r in schema_columns(s)]
        rng.shuffle(candidates)
        taken_tables = {t.name.lower(): schema.db_id for t in schema.tables}
        taken_names = {r.qualified for r in required} | {r.qualified for r in local}
        foreign = []
        for ref in candidates:
            if len(foreign) == need:
                break
            owner = taken_tables.get(ref.table_name)
            if (owner is not None and owner != ref.db_id) or ref.qualified in taken_names:
                continue
            taken_tables[ref.table_name] = ref.db_id
            taken_names.add(ref.qualified)
            foreign.append(ref)
        if len(foreign) < need:
            raise InsufficientColumns(
                f"need {n_irrelevant} irrelevant columns, only "
                f"{len(local) + len(foreign)} non-colliding columns available"
            )

    chosen_local = set(picked_local) | required
    retrieved = [r for r in schema_columns(schema) if r in chosen_local]
    pool_order = {s.db_id: i for i, s in enumerate(foreign_pool)}
    foreign_set = set(foreign)
    for s in sorted({r.db_id for r in foreign}, key=pool_order.__getitem__):
        pool_schema = foreign_pool[pool_order[s]]
        retrieved.extend(r for r in schema_columns(pool_schema) if r in foreign_set)
    return LinkerOutput(
        retrieved,
        Strategy.MOCKED_FPR,
        {
            "target_rate": target.rate,
            "irrelevant": n_irrelevant,
            "foreign": len(foreign),
            "achieved_fpr": n_irrelevant / (len(required) + n_irrelevant),
        },
    )


def materialize(output: LinkerOutput, schema: Schema, foreign_pool: Sequence[Schema] = ()) -> tuple[Schema, list[ColumnRef]]:
    """A single renderable schema holding every retrieved column.

    Foreign columns from a mocked linker are grafted onto ``schema`` as extra
    tables (their foreign keys dropped); the returned subset is keyed to the
    combined schema.
    """
    foreign_refs = [r for r in output.retrieved if r.db_id != schema.db_id]
    if not foreign_refs:
        return schema, list(output.retrieved)
    pool = {s.db_id: s for s in foreign_pool}
    extra: dict[str, list[Column]] = {}
    names: dict[str, str] = {}
    for ref in foreign_refs:
        src = pool[ref.db_id]
        table = src.table(ref.table_name)
        col = src.lookup(ref)
        names.setdefault(ref.table_name, table.name)
        extra.setdefault(ref.table_name, []).append(replace(col, fk_target=None))
    tables = list(schema.tables) + [Table(names[k], tuple(v)) for k, v in extra.items()]
    combined = Schema(schema.db_id, tuple(tables))
    subset = [r for r in output.retrieved if r.db_id == schema.db_id]
    subset += [combined.ref(r.table_name, r.column_name) for r in foreign_refs]
    return combined, subset


def full_schema_link(schema: Schema) -> LinkerOutput:
    return LinkerOutput(schema_columns(schema), Strategy.FULL_SCHEMA)


# ---------------------------------------------------------------------------
# LLM linkers

_TRUE = {"true", "yes", "relevant", "1", "y"}
_FALSE = {"false", "no", "irrelevant", "not relevant", "0", "n"}


def _column_line(table: Table, col: Column) -> str:
    parts = [f"{quote_identifier(table.name)}.{quote_identifier(col.name)}"]
    if col.declared_type:
        parts.append(f"({col.declared_type})")
    desc = col.expanded_description or col.description
    if desc:
        parts.append(f"- {' '.join(desc.split())}")
    return " ".join(parts)


def column_block(schema: Schema, table: Table, col: Column) -> str:
    return _column_line(table, col)


def table_block(schema: Schema) -> str:
    lines = []
    for table in schema.tables:
        cols = ", ".join(quote_identifier(c.name) for c in table.columns)
        lines.append(f"{quote_identifier(table.name)}: {cols}")
    return "\n".join(lines)


def _json_payload(text: str):
    for candidate in (text.strip(), last_fenced_block(text) or ""):
        if not candidate:
            continue
        try:
            return json.loads(candidate)
        except json.JSONDecodeError:
            match = re.search(r"[\[{].*[\]}]", candidate, re.S)
            if match:
                try:
                    return json.loads(match.group(0))
                except json.JSONDecodeError:
                    pass
    return None


def parse_judgment(text: str) -> bool | None:
    """Boolean relevance from a judgment reply, or None when it cannot be read."""
    obj = _json_payload(text)
    if isinstance(obj, dict) and isinstance(obj.get("relevant"), bool):
        return obj["relevant"]
    if isinstance(obj, bool):
        return obj
    word = re.sub(r"[^a-z0-9 ]", "", text.strip().lower())
    if word in _TRUE:
        return True
    if word in _FALSE:
        return False
    return None


def _parse_name_list(text: str, key: str) -> list[str] | None:
    obj = _json_payload(text)
    if isinstance(obj, dict):
        obj = obj.get(key)
    if isinstance(obj, list) and all(isinstance(x, str) for x in obj):
        return obj
    return None


def _strip_quotes(name: str) -> str:
    return name.strip().strip("`\"[]").lower()


def scsl_link(
    question: str,
    hint: str,
    schema: Schema,
    provider: ChatProvider,
    model_id: str = "gpt-4o-mini",
    template_dir: str | Path | None = None,
) -> LinkerOutput:
    """Single-column linking: one independent relevance judgment per column.

    Unreadable judgments count as relevant. If nothing is judged relevant the
    full schema is returned.
    """
    template = load_template("scsl_column", template_dir)
    kept: list[ColumnRef] = []
    malformed: list[str] = []
    for table in schema.tables:
        for col in table.columns:
            ref = schema.ref(table.name, col.name)
            system, user = template.render(
                question=question, hint=hint, column_block=column_block(schema, table, col)
            )
            request = user_request(model_id, system, user, purpose="scsl")
            try:
                reply = provider.complete(request).text
            except ProviderError as exc:
                raise type(exc)(f"SCSL judgment for {ref}: {exc}") from exc
            verdict = parse_judgment(reply)
            if verdict is None:
                malformed.append(ref.qualified)
                verdict = True
            if verdict:
                kept.append(ref)
    diagnostics = {"malformed": malformed}
    if not kept:
        diagnostics["fallback"] = "full_schema"
        kept = schema_columns(schema)
    return LinkerOutput(kept, Strategy.SCSL, diagnostics)


def tcsl_link(
    question: str,
    hint: str,
    schema: Schema,
    provider: ChatProvider,
    model_id: str = "gpt-4o",
    template_dir: str | Path | None = None,
) -> LinkerOutput:
    """Table-then-column linking. Empty or unreadable answers at a stage keep that stage's input."""
    diagnostics: dict = {}
    system, user = load_template("tcsl_tables", template_dir).render(
        question=question, hint=hint, table_block=table_block(schema)
    )
    reply = provider.complete(user_request(model_id, system, user, purpose="tcsl_tables")).text
    names = _parse_name_list(reply, "tables")
    if names is None:
        diagnostics["malformed_tables"] = True
    wanted = {_strip_quotes(n) for n in names or []}
    tables = [t for t in schema.tables if t.name.lower() in wanted]
    if not tables:
        diagnostics["table_fallback"] = True
        tables = list(schema.tables)
    diagnostics["tables"] = [t.name for t in tables]

    block = "\n".join(column_block(schema, t, c) for t in tables for c in t.columns)
    system, user = load_template("tcsl_columns", template_dir).render(
        question=question, hint=hint, column_block=block
    )
    reply = provider.complete(user_request(model_id, system, user, purpose="tcsl_columns")).text
    names = _parse_name_list(reply, "columns")
    if names is None:
        diagnostics["malformed_columns"] = True
    stage_input = [schema.ref(t.name, c.name) for t in tables for c in t.columns]
    picked = set()
    for name in names or []:
        if "." not in name:
            continue
        tname, cname = name.rsplit(".", 1) if name.count(".") > 1 else name.split(".")
        ref = ColumnRef(schema.db_id, _strip_quotes(tname), _strip_quotes(cname))
        if ref in stage_input:
            picked.add(ref)
    if not picked:
        diagnostics["column_fallback"] = True
        picked = set(stage_input)
    return LinkerOutput(_ordered(picked, schema), Strategy.TCSL, diagnostics)


# ---------------------------------------------------------------------------
# keyword matching

_STOPWORDS = frozenset(
    """
    about above after also among and another been before being below between both
    does doing done each either every from have having here into just like many more
    most much must only other over same should show some such than that their them
    then there these they this those through under unto very were what when where
    which while whom whose will with within would your give list tell find
    """.split()
)


def _tokens(text: str) -> list[str]:
    return re.sub(r"[^0-9a-z]+", " ", text.lower()).split()


def _contains_phrase(tokens: list[str], phrase: list[str]) -> bool:
    n = len(phrase)
    return any(tokens[i : i + n] == phrase for i in range(len(tokens) - n + 1))


def keyword_match(question: str, hint: str, schema: Schema) -> set[ColumnRef]:
    """Columns whose name, or a meaningful description word, occurs in the question or hint.

    Text is lowercased, punctuation and underscores become spaces. A column
    matches when its whole normalized name occurs as a token sequence, or when
    a description token of four or more letters (not a stopword) occurs as a
    token.
    """
    tokens = _tokens(f"{question} {hint}")
    vocab = set(tokens)
    matched = set()
    for table in schema.tables:
        for col in table.columns:
            name = _tokens(col.name)
            if name and _contains_phrase(tokens, name):
                matched.add(schema.ref(table.name, col.name))
                continue
            words = {w for w in _tokens(col.description) if len(w) >= 4 and w not in _STOPWORDS}
            if words & vocab:
                matched.add(schema.ref(table.name, col.name))
    return matched


def hybridize(base: LinkerOutput, keywords: Iterable[ColumnRef], schema: Schema | None = None) -> LinkerOutput:
    """Union of ``base`` and keyword matches, marked as the hybrid variant.

    With ``schema`` the union is in declaration order; without it, new
    keyword columns follow the base columns in sorted order.
    """
    keywords = set(keywords)
    if schema is not None:
        merged = _ordered(set(base.retrieved) | keywords, schema)
    else:
        merged = list(base.retrieved) + sorted(keywords - set(base.retrieved))
    diagnostics = dict(base.diagnostics)
    diagnostics["keyword_added"] = len(merged) - len(base.retrieved)
    return LinkerOutput(merged, _HYBRID.get(base.strategy_id, base.strategy_id), diagnostics)

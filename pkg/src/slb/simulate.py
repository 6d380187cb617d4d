"""A deterministic stand-in for a chat model, used for offline experiments and tests.

The simulator knows the gold SQL of every task. Its generation answers are
correct with a probability that falls as the prompt's schema grows, so the
harness can be exercised end to end without a live model. Every decision is
a hash of the request content and a seed, never of call order.
"""

from __future__ import annotations

import hashlib
import json
import re
from typing import Callable, Iterable, Mapping

from .llm import ChatRequest, ChatResponse, ProviderError, last_fenced_block
from .oracle import OracleError, extract_required_columns, linking_targets

_SCHEMA_BLOCK = re.compile(r"### Database schema\n(.*?)\n\n### Question", re.S)
_QUESTION = re.compile(r"### Question\n(.*?)(?:\n\n###|\Z)", re.S)
_CREATE = re.compile(r"^CREATE TABLE (`(?:[^`]|``)+`|\S+) \($")
_IDENT = re.compile(r"`((?:[^`]|``)+)`|([^\s`,.()]+)")


def _unquote(token: str) -> str:
    if token.startswith("`") and token.endswith("`"):
        return token[1:-1].replace("``", "`")
    return token


def parse_rendered_schema(text: str) -> set[tuple[str, str]]:
    """(table, column) pairs, lowercased, from CREATE TABLE renderings."""
    pairs = set()
    table = None
    for line in text.splitlines():
        match = _CREATE.match(line)
        if match:
            table = _unquote(match.group(1)).lower()
            continue
        if table is None or not line.startswith("  "):
            continue
        body = line.strip()
        if body.startswith(("PRIMARY KEY (", "FOREIGN KEY (")):
            continue
        ident = _IDENT.match(body)
        if ident:
            name = ident.group(1).replace("``", "`") if ident.group(1) else ident.group(2)
            pairs.add((table, name.lower()))
    return pairs


def _split_qualified(text: str) -> tuple[str, str] | None:
    parts = [m.group(1).replace("``", "`") if m.group(1) else m.group(2) for m in _IDENT.finditer(text)]
    if len(parts) < 2:
        return None
    return parts[0].lower(), parts[1].lower()


def default_curve(columns: int) -> float:
    """Success probability that halves every 150 prompt columns past a small schema."""
    return 0.9 * 0.5 ** (max(columns - 10, 0) / 150.0)


class SimulatedProvider:
    """Answers every prompt kind the pipeline issues, keyed on ``request.purpose``.

    ``tasks`` are objects with ``question``, ``gold_sql`` and ``db_id``;
    ``schemas`` maps db_id to Schema for the oracle. ``skill`` maps a model id
    to a multiplier on the success curve.
    """

    def __init__(
        self,
        tasks: Iterable,
        schemas: Mapping,
        seed: int = 0,
        curve: Callable[[int], float] = default_curve,
        skill: Mapping[str, float] | None = None,
        plan_bonus: float = 0.05,
        fix_rate: float = 0.5,
        error_share: float = 0.5,
        judge_fp: float = 0.35,
        judge_fn: float = 0.08,
        table_fp: float = 0.1,
        table_fn: float = 0.1,
        column_fp: float = 0.05,
        column_fn: float = 0.12,
        fenced_share: float = 0.0,
    ):
        self.seed = seed
        self.curve = curve
        self.skill = dict(skill or {})
        self.plan_bonus = plan_bonus
        self.fix_rate = fix_rate
        self.error_share = error_share
        self.judge = (judge_fp, judge_fn)
        self.tables = (table_fp, table_fn)
        self.columns = (column_fp, column_fn)
        self.fenced_share = fenced_share
        self.gold: dict[str, str] = {}
        self.required: dict[str, set[tuple[str, str]]] = {}
        for task in tasks:
            self.gold[task.question.strip()] = task.gold_sql
            try:
                deps = extract_required_columns(task.gold_sql, schemas[task.db_id])
                refs = linking_targets(deps, schemas[task.db_id])
            except OracleError:
                refs = set()
            self.required[task.question.strip()] = {(r.table_name, r.column_name) for r in refs}
        self.calls = 0

    # deterministic uniform draw in [0, 1)
    def _u(self, *parts: object) -> float:
        key = "\x1f".join(map(str, (self.seed, *parts))).encode("utf-8")
        return int.from_bytes(hashlib.sha256(key).digest()[:8], "big") / 2**64

    def _question(self, text: str) -> str:
        match = _QUESTION.search(text)
        if not match:
            raise ProviderError("simulator: prompt has no question section")
        question = match.group(1).strip()
        if question not in self.gold:
            raise ProviderError(f"simulator: unknown question {question[:60]!r}")
        return question

    def _wrap(self, sql: str, tag: str) -> str:
        if self._u("fence", tag) < self.fenced_share:
            return f"Here is the query:\n```sql\n{sql}\n```"
        return json.dumps({"sql": sql})

    def _miss(self, question: str, tag: str) -> str:
        if self._u("miss-kind", question, tag) < self.error_share:
            return f"SELECT missing_column_{int(self._u('id', question, tag) * 1e6)} FROM sqlite_master"
        return f"SELECT 'wrong answer {int(self._u('id', question, tag) * 1e6)}'"

    def complete(self, request: ChatRequest) -> ChatResponse:
        self.calls += 1
        handler = getattr(self, f"_on_{request.purpose}", None)
        if handler is None:
            raise ProviderError(f"simulator cannot answer purpose {request.purpose!r}")
        system = "\n".join(c for r, c in request.messages if r == "system")
        user = "\n".join(c for r, c in request.messages if r == "user")
        return ChatResponse(text=handler(request, system, user))

    def _on_generation(self, request: ChatRequest, system: str, user: str) -> str:
        question = self._question(user)
        block = _SCHEMA_BLOCK.search(user)
        shown = parse_rendered_schema(block.group(1)) if block else set()
        tag = hashlib.sha256((system + request.model_id + str(request.temperature)).encode()).hexdigest()[:12]
        if not self.required[question] <= shown:
            return self._wrap(self._miss(question, tag), tag)
        p = self.curve(len(shown)) * self.skill.get(request.model_id, 1.0)
        if "### Plan" in user:
            p += self.plan_bonus
        # the threshold ignores the schema so that success only shrinks as columns grow
        if self._u("gen", question, tag) < p:
            return self._wrap(self.gold[question], tag)
        return self._wrap(self._miss(question, tag), tag)

    def _on_correction(self, request: ChatRequest, system: str, user: str) -> str:
        question = self._question(user)
        failed = user.split("### Failed query\n", 1)[1].split("\n\n###", 1)[0].strip()
        fixed = self._u("fix", question, failed) < self.fix_rate
        sql = self.gold[question] if fixed else failed
        return json.dumps(
            {
                "critique": "The query referenced something that does not exist.",
                "instructions": "Check every column name against the schema before using it.",
                "sql": sql,
            }
        )

    def _on_guard(self, request: ChatRequest, system: str, user: str) -> str:
        return json.dumps({"sql": last_fenced_block(user) or user.strip()})

    def _on_scsl(self, request: ChatRequest, system: str, user: str) -> str:
        question = user.split("### Question\n", 1)[1].split("\n\n###", 1)[0].strip()
        column = user.split("### Column\n", 1)[1].split("\n\n###", 1)[0]
        pair = _split_qualified(column)
        fp, fn = self.judge
        needed = pair in self.required.get(question, set())
        u = self._u("scsl", question, pair)
        return json.dumps({"relevant": (u >= fn) if needed else (u < fp)})

    def _on_tcsl_tables(self, request: ChatRequest, system: str, user: str) -> str:
        question = user.split("### Question\n", 1)[1].split("\n\n###", 1)[0].strip()
        block = user.split("### Tables\n", 1)[1].split("\n\n###", 1)[0]
        needed = {t for t, _ in self.required.get(question, set())}
        fp, fn = self.tables
        keep = []
        for line in block.splitlines():
            name = _unquote(line.split(": ", 1)[0].strip())
            u = self._u("tcsl_t", question, name.lower())
            if (name.lower() in needed and u >= fn) or (name.lower() not in needed and u < fp):
                keep.append(name)
        return json.dumps({"tables": keep})

    def _on_tcsl_columns(self, request: ChatRequest, system: str, user: str) -> str:
        question = user.split("### Question\n", 1)[1].split("\n\n###", 1)[0].strip()
        block = user.split("### Columns\n", 1)[1].split("\n\n###", 1)[0]
        needed = self.required.get(question, set())
        fp, fn = self.columns
        keep = []
        for line in block.splitlines():
            pair = _split_qualified(line)
            if pair is None:
                continue
            u = self._u("tcsl_c", question, pair)
            if (pair in needed and u >= fn) or (pair not in needed and u < fp):
                keep.append(f"{pair[0]}.{pair[1]}")
        return json.dumps({"columns": keep})

    def _on_augment_descriptions(self, request: ChatRequest, system: str, user: str) -> str:
        block = user.split("### Columns to describe\n", 1)[1].split("\n\n###", 1)[0]
        out = {}
        for line in block.splitlines():
            key = line.split(" (", 1)[0].strip()
            if "." in key:
                table, column = key.split(".", 1)
                out[key] = f"The {column.replace('_', ' ')} recorded for each {table} row."
        return json.dumps(out)

    def _on_augment_plan(self, request: ChatRequest, system: str, user: str) -> str:
        return "Return only the requested columns; apply the filters from the hint; no extra ordering."

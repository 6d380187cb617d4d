"""End-to-end text-to-SQL flow: link, augment, generate, correct, select."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

from .executor import DEFAULT_TIMEOUT, ErrorKind, ExecutionResult, execute, fingerprint, is_error_fingerprint
from .linker import (
    LinkerError,
    LinkerOutput,
    Strategy,
    TargetFPR,
    full_schema_link,
    hybridize,
    keyword_match,
    materialize,
    mock_link,
    scsl_link,
    tcsl_link,
)
from .llm import (
    ChatProvider,
    CountingProvider,
    ProviderError,
    UnrecoverableFormat,
    format_guard,
    user_request,
)
from .oracle import OracleError, extract_required_columns, linking_targets
from .prompts import generation_headers, load_template, load_text, section
from .schema import ColumnRef, Schema, render_schema, schema_columns

logger = logging.getLogger(__name__)

TERSE_WORDS = 3


class PipelineError(Exception):
    pass


@dataclass(frozen=True)
class QueryTask:
    task_id: str
    db_id: str
    question: str
    hint: str = ""
    gold_sql: str = ""
    difficulty: str = ""

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise PipelineError(f"task {self.task_id}: empty question")


@dataclass
class AugmentedContext:
    schema_subset: tuple[ColumnRef, ...]
    expanded_descriptions: dict[ColumnRef, str] = field(default_factory=dict)
    structural_plan: str = ""
    hint: str = ""
    # instructions learned from correction rounds, fed to later rounds
    instructions: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.schema_subset = tuple(self.schema_subset)
        extra = set(self.expanded_descriptions) - set(self.schema_subset)
        if extra:
            raise PipelineError(f"expansions for columns outside the subset: {sorted(map(str, extra))}")


class Origin(str, enum.Enum):
    GENERATION = "Generation"
    CORRECTION = "Correction"


@dataclass(frozen=True)
class CandidateSQL:
    sql: str
    origin: Origin = Origin.GENERATION
    round: int = 0
    plan_used: str | None = None
    variant: int = 0

    def __post_init__(self) -> None:
        if not self.sql or not self.sql.strip():
            raise PipelineError("candidate SQL must be non-empty")
        if self.round < 0:
            raise PipelineError("round must be >= 0")


@dataclass
class PipelineConfig:
    linker_strategy: Strategy = Strategy.FULL_SCHEMA
    augmentation_enabled: bool = True
    selection_k: int = 5
    correction_max_rounds: int = 3
    generation_model: str = "gpt-4o"
    correction_model: str | None = None
    augmentation_model: str | None = None
    linker_model: str | None = None
    guard_model: str = "gpt-4o-mini"
    seed: int = 0
    # MockedFPR only
    target_fpr: float = 0.0
    # >0 switches candidate diversity from header variants to sampling temperature
    generation_temperature: float = 0.0
    include_samples: bool = False
    template_dir: str | None = None
    timeout: float = DEFAULT_TIMEOUT
    comparison: str = "multiset"

    def __post_init__(self) -> None:
        self.linker_strategy = Strategy(self.linker_strategy)
        if self.selection_k < 1:
            raise PipelineError("selection_k must be >= 1")
        if self.correction_max_rounds < 0:
            raise PipelineError("correction_max_rounds must be >= 0")
        if self.generation_temperature < 0:
            raise PipelineError("generation_temperature must be >= 0")
        TargetFPR(self.target_fpr)
        if self.comparison not in ("multiset", "set"):
            raise PipelineError(f"unknown comparison mode {self.comparison!r}")

    @classmethod
    def simplified(cls, **overrides) -> "PipelineConfig":
        """Linking followed by a single generation attempt."""
        base = dict(augmentation_enabled=False, selection_k=1, correction_max_rounds=0)
        base.update(overrides)
        return cls(**base)

    def model_for(self, stage: str) -> str:
        override = {
            "correction": self.correction_model,
            "augmentation": self.augmentation_model,
            "linker": self.linker_model,
        }.get(stage)
        return override or self.generation_model

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["linker_strategy"] = self.linker_strategy.value
        return out


@dataclass
class PipelineOutcome:
    task_id: str
    final_sql: str
    execution: ExecutionResult
    retrieved: LinkerOutput | None
    candidates: list[CandidateSQL]
    correction_rounds_used: int = 0
    provider_calls: int = 0
    failure: str = ""
    required: frozenset[ColumnRef] = frozenset()

    def __post_init__(self) -> None:
        if self.candidates and self.final_sql not in {c.sql for c in self.candidates}:
            raise PipelineError("final SQL must be one of the candidates")


class SchemaStore(Protocol):
    def schema(self, db_id: str) -> Schema: ...

    def db_path(self, db_id: str) -> Path: ...

    def foreign_pool(self, db_id: str) -> list[Schema]: ...


class MemoryStore:
    """Schema store over already-loaded schemas."""

    def __init__(self, schemas: Mapping[str, Schema], db_paths: Mapping[str, str | Path]):
        self.schemas = dict(schemas)
        self.paths = {k: Path(v) for k, v in db_paths.items()}

    def schema(self, db_id: str) -> Schema:
        return self.schemas[db_id]

    def db_path(self, db_id: str) -> Path:
        return self.paths[db_id]

    def foreign_pool(self, db_id: str) -> list[Schema]:
        return [s for k, s in sorted(self.schemas.items()) if k != db_id]


def task_rng(seed: int, *parts: object) -> random.Random:
    """Independent generator per (seed, parts); stable across processes."""
    key = "\x1f".join([str(seed), *map(str, parts)]).encode("utf-8")
    return random.Random(int.from_bytes(hashlib.sha256(key).digest()[:8], "big"))


# ---------------------------------------------------------------------------
# prompts


def _column_key(ref: ColumnRef) -> str:
    return f"{ref.table_name}.{ref.column_name}"


def prompt_schema(schema: Schema, context: AugmentedContext, include_samples: bool = False) -> str:
    view = schema.with_expanded_descriptions(context.expanded_descriptions) if context.expanded_descriptions else schema
    return render_schema(view, context.schema_subset, include_descriptions=True, include_samples=include_samples)


def generation_prompt(task: QueryTask, context: AugmentedContext, schema: Schema, variant: int = 0,
                      include_plan: bool = True, include_samples: bool = False,
                      template_dir: str | None = None) -> tuple[str, str]:
    headers = generation_headers(template_dir)
    plan = context.structural_plan if include_plan else ""
    return load_template("generation", template_dir).render(
        instruction_header=headers[variant % len(headers)],
        schema=prompt_schema(schema, context, include_samples),
        question=task.question,
        hint_section=section("Hint", context.hint),
        plan_section=section("Plan", plan),
    )


def _variant_plan(k: int, n_headers: int) -> tuple[int, bool]:
    # header paraphrase cycles fastest; every other full cycle drops the plan
    return k % n_headers, (k // n_headers) % 2 == 0


# ---------------------------------------------------------------------------
# stages


def _is_terse(text: str) -> bool:
    return len(text.split()) < TERSE_WORDS


def _describe(schema: Schema, ref: ColumnRef) -> str:
    col = schema.lookup(ref)
    line = f"{_column_key(ref)} ({col.declared_type or 'untyped'})"
    if col.description:
        line += f" - {col.description}"
    if col.sample_values:
        line += "; examples: " + ", ".join(col.sample_values)
    return line


def _json_object(text: str) -> dict | None:
    text = text.strip()
    if text.startswith("```"):
        text = text.strip("`")
        text = text[text.find("\n") + 1 :] if "\n" in text else text
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end <= start:
        return None
    try:
        obj = json.loads(text[start : end + 1])
    except json.JSONDecodeError:
        return None
    return obj if isinstance(obj, dict) else None


def augment(task: QueryTask, schema_subset: Sequence[ColumnRef], provider: ChatProvider | None,
            schema: Schema | None = None, config: PipelineConfig | None = None) -> AugmentedContext:
    """Expand terse descriptions and add a structural plan. Never fails the query.

    With ``provider`` None (augmentation disabled) the context is returned
    with no expansions and an empty plan.
    """
    subset = tuple(schema_subset)
    if not subset:
        raise PipelineError("cannot augment an empty schema subset")
    context = AugmentedContext(subset, hint=task.hint)
    if provider is None or schema is None:
        return context
    config = config or PipelineConfig()
    model = config.model_for("augmentation")

    terse = [r for r in subset if _is_terse(schema.lookup(r).description)]
    if terse:
        system, user = load_template("augment_descriptions", config.template_dir).render(
            question=task.question, column_block="\n".join(_describe(schema, r) for r in terse)
        )
        try:
            reply = provider.complete(user_request(model, system, user, purpose="augment_descriptions")).text
            obj = _json_object(reply) or {}
        except ProviderError as exc:
            logger.warning("description expansion failed for %s: %s", task.task_id, exc)
            obj = {}
        by_key = {_column_key(r): r for r in terse}
        for key, text in obj.items():
            ref = by_key.get(str(key).strip().strip("`\"").lower())
            if ref is not None and isinstance(text, str) and text.strip():
                context.expanded_descriptions[ref] = " ".join(text.split())

    system, user = load_template("augment_plan", config.template_dir).render(
        schema=prompt_schema(schema, context, config.include_samples),
        question=task.question,
        hint_section=section("Hint", task.hint),
    )
    try:
        context.structural_plan = provider.complete(
            user_request(model, system, user, purpose="augment_plan")
        ).text.strip()
    except ProviderError as exc:
        logger.warning("planning failed for %s: %s", task.task_id, exc)
    return context


def generate(task: QueryTask, context: AugmentedContext, schema: Schema, provider: ChatProvider,
             config: PipelineConfig | None = None, variant: int = 0) -> CandidateSQL:
    """One generation call for prompt variant ``variant``, passed through the format guard."""
    config = config or PipelineConfig.simplified()
    if config.generation_temperature > 0:
        header, use_plan, temperature = 0, True, config.generation_temperature
    else:
        header, use_plan = _variant_plan(variant, len(generation_headers(config.template_dir)))
        temperature = 0.0
    system, user = generation_prompt(
        task, context, schema, header, use_plan, config.include_samples, config.template_dir
    )
    request = user_request(config.generation_model, system, user, temperature=temperature, purpose="generation")
    raw = provider.complete(request).text
    sql = format_guard(raw, config.guard_model, provider)
    plan = context.structural_plan if use_plan and context.structural_plan else None
    return CandidateSQL(sql.strip(), Origin.GENERATION, 0, plan, variant)


class _CachedExecutor:
    def __init__(self, db_path: str | Path, timeout: float):
        self.db_path, self.timeout = db_path, timeout
        self.cache: dict[str, ExecutionResult] = {}

    def __call__(self, sql: str) -> ExecutionResult:
        if sql not in self.cache:
            self.cache[sql] = execute(sql, self.db_path, self.timeout)
        return self.cache[sql]


def correct(candidate: CandidateSQL, task: QueryTask, context: AugmentedContext, db_path: str | Path,
            provider: ChatProvider, max_rounds: int, schema: Schema | None = None,
            config: PipelineConfig | None = None,
            executor: Callable[[str], ExecutionResult] | None = None) -> CandidateSQL:
    """Execution-guided repair: re-prompt with the error until the query runs or rounds run out."""
    if max_rounds < 0:
        raise PipelineError("max_rounds must be >= 0")
    if max_rounds == 0:
        return candidate
    if schema is None:
        raise PipelineError("correction needs the schema to render its prompt")
    config = config or PipelineConfig()
    run = executor or _CachedExecutor(db_path, config.timeout)
    guidelines = load_text("admin_guidelines", config.template_dir)
    template = load_template("correction", config.template_dir)
    current = candidate
    learned = list(context.instructions)
    for _ in range(max_rounds):
        result = run(current.sql)
        if result.ok:
            break
        kind = result.error_kind.value if result.error_kind else result.outcome.value
        system, user = template.render(
            schema=prompt_schema(schema, context, config.include_samples),
            question=task.question,
            hint_section=section("Hint", context.hint),
            sql=current.sql,
            error_kind=kind,
            error_message=result.message or "query did not return rows",
            guidelines=guidelines,
            instructions_section=section("Instructions from earlier corrections", "\n".join(learned)),
        )
        request = user_request(config.model_for("correction"), system, user, purpose="correction")
        try:
            raw = provider.complete(request).text
            sql = format_guard(raw, config.guard_model, provider).strip()
        except (ProviderError, UnrecoverableFormat) as exc:
            logger.warning("correction round failed for %s: %s", task.task_id, exc)
            break
        obj = _json_object(raw)
        if obj and isinstance(obj.get("instructions"), str) and obj["instructions"].strip():
            learned.append(obj["instructions"].strip())
        if not sql:
            break
        current = CandidateSQL(sql, Origin.CORRECTION, current.round + 1, current.plan_used, current.variant)
    context.instructions[:] = learned
    return current


def select(candidates: Sequence[CandidateSQL], db_path: str | Path | None = None,
           executor: Callable[[str], ExecutionResult] | None = None,
           timeout: float = DEFAULT_TIMEOUT) -> CandidateSQL:
    """Self-consistency: earliest member of the largest cluster of equal results.

    Error and timeout clusters only win when no candidate returned rows.
    """
    if not candidates:
        raise PipelineError("select needs at least one candidate")
    run = executor or _CachedExecutor(db_path, timeout)
    clusters: dict[str, list[int]] = {}
    for i, cand in enumerate(candidates):
        clusters.setdefault(fingerprint(run(cand.sql)), []).append(i)
    eligible = [members for fp, members in clusters.items() if not is_error_fingerprint(fp)]
    if not eligible:
        return candidates[0]
    best = max(eligible, key=lambda m: (len(m), -m[0]))
    return candidates[best[0]]


# ---------------------------------------------------------------------------
# orchestration


def link(task: QueryTask, schema: Schema, store: SchemaStore, config: PipelineConfig,
         provider: ChatProvider, required: set[ColumnRef] | None = None) -> LinkerOutput:
    strategy = config.linker_strategy
    model = config.model_for("linker")
    if strategy is Strategy.FULL_SCHEMA:
        return full_schema_link(schema)
    if strategy is Strategy.MOCKED_FPR:
        if required is None:
            required = linking_targets(extract_required_columns(task.gold_sql, schema), schema)
        rng = task_rng(config.seed, task.task_id, "mock", config.target_fpr)
        return mock_link(required, schema, store.foreign_pool(task.db_id), TargetFPR(config.target_fpr), rng)
    if strategy in (Strategy.SCSL, Strategy.HYSCSL):
        base = scsl_link(task.question, task.hint, schema, provider, model, config.template_dir)
    else:
        base = tcsl_link(task.question, task.hint, schema, provider, model, config.template_dir)
    if strategy in (Strategy.HYSCSL, Strategy.HYTCSL):
        return hybridize(base, keyword_match(task.question, task.hint, schema), schema)
    return base


def _failed(task: QueryTask, retrieved, candidates, calls, message, required) -> PipelineOutcome:
    final = candidates[0].sql if candidates else ""
    return PipelineOutcome(
        task.task_id, final, ExecutionResult.error(ErrorKind.RUNTIME, message), retrieved,
        list(candidates), 0, calls, message, frozenset(required),
    )


def run_pipeline(task: QueryTask, store: SchemaStore, config: PipelineConfig,
                 provider: ChatProvider) -> PipelineOutcome:
    """Run every enabled stage for one task. Failures are encoded in the outcome, never raised."""
    counter = CountingProvider(provider)
    schema = store.schema(task.db_id)
    db_path = store.db_path(task.db_id)
    required: set[ColumnRef] = set()
    if task.gold_sql:
        try:
            required = linking_targets(extract_required_columns(task.gold_sql, schema), schema)
        except OracleError as exc:
            if config.linker_strategy is Strategy.MOCKED_FPR:
                return _failed(task, None, [], 0, f"oracle failed on gold SQL: {exc}", required)
            logger.warning("oracle failed on gold SQL of %s: %s", task.task_id, exc)

    retrieved = None
    candidates: list[CandidateSQL] = []
    try:
        retrieved = link(task, schema, store, config, counter, required or None)
        prompt_schema_, subset = materialize(retrieved, schema, store.foreign_pool(task.db_id))
        context = augment(
            task, subset, counter if config.augmentation_enabled else None, prompt_schema_, config
        )
        errors = []
        for k in range(config.selection_k):
            try:
                candidates.append(generate(task, context, prompt_schema_, counter, config, k))
            except UnrecoverableFormat as exc:
                errors.append(str(exc))
        if not candidates:
            return _failed(task, retrieved, [], counter.count, "; ".join(errors), required)
        run = _CachedExecutor(db_path, config.timeout)
        rounds = 0
        if config.correction_max_rounds > 0:
            fixed = []
            for cand in candidates:
                # each candidate gets its own copy of the learned instructions
                local = replace(context, instructions=list(context.instructions),
                                expanded_descriptions=dict(context.expanded_descriptions))
                out = correct(cand, task, local, db_path, counter, config.correction_max_rounds,
                              prompt_schema_, config, run)
                rounds = max(rounds, out.round)
                fixed.append(out)
            candidates = fixed
        chosen = select(candidates, executor=run)
        execution = run(chosen.sql)
    except (ProviderError, UnrecoverableFormat, OracleError, PipelineError, LinkerError) as exc:
        return _failed(task, retrieved, candidates, counter.count, f"{type(exc).__name__}: {exc}", required)
    except Exception as exc:  # linker or schema errors must not crash a run
        logger.exception("task %s failed", task.task_id)
        return _failed(task, retrieved, candidates, counter.count, f"{type(exc).__name__}: {exc}", required)
    return PipelineOutcome(
        task.task_id, chosen.sql, execution, retrieved, candidates, rounds, counter.count, "", frozenset(required)
    )


# ---------------------------------------------------------------------------
# fine-tuning data


@dataclass(frozen=True)
class FinetuneTriple:
    task_id: str
    question: str
    gold_sql: str
    schema_text: str
    hint: str = ""


def build_finetune_triples(tasks: Sequence[QueryTask], store: SchemaStore, rng: random.Random, n: int,
                           skipped: list | None = None) -> list[FinetuneTriple]:
    """``n`` sampled tasks, each with its required columns plus a uniform number of irrelevant ones.

    Tasks whose gold SQL the oracle cannot read are skipped and appended to
    ``skipped`` as ``(task_id, reason)``.
    """
    if n < 0 or n > len(tasks):
        raise PipelineError(f"cannot sample {n} of {len(tasks)} tasks")
    triples = []
    for task in rng.sample(list(tasks), n):
        schema = store.schema(task.db_id)
        try:
            required = linking_targets(extract_required_columns(task.gold_sql, schema), schema)
        except OracleError as exc:
            if skipped is not None:
                skipped.append((task.task_id, str(exc)))
            continue
        others = [r for r in schema_columns(schema) if r not in required]
        extra = rng.sample(others, rng.randint(0, len(others)))
        text = render_schema(schema, required | set(extra))
        triples.append(FinetuneTriple(task.task_id, task.question, task.gold_sql, text, task.hint))
    return triples


def to_chat_records(triples: Iterable[FinetuneTriple], template_dir: str | None = None) -> list[dict]:
    """Chat-format training records: the generation prompt and the gold SQL envelope."""
    template = load_template("generation", template_dir)
    header = generation_headers(template_dir)[0]
    records = []
    for t in triples:
        system, user = template.render(
            instruction_header=header,
            schema=t.schema_text,
            question=t.question,
            hint_section=section("Hint", t.hint),
            plan_section="",
        )
        records.append(
            {
                "messages": [
                    {"role": "system", "content": system},
                    {"role": "user", "content": user},
                    {"role": "assistant", "content": json.dumps({"sql": t.gold_sql}, ensure_ascii=False)},
                ]
            }
        )
    return records

"""Experiment orchestration: datasets, sampling, the experiment templates and report files."""

from __future__ import annotations

import csv
import dataclasses
import enum
import io
import json
import logging
import math
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .executor import ExecutionResult, GoldExecutionFailed, execute, results_match
from .linker import LinkerError, Strategy
from .llm import (
    ChatProvider,
    Gateway,
    OpenAICompatibleProvider,
    ProviderConfig,
    RecordingProvider,
    ScriptedProvider,
)
from .metrics import CurvePoint, QueryEvaluation, RunReport, mean_std, round_pct, sensitivity
from .oracle import OracleError, extract_required_columns
from .pipeline import PipelineConfig, PipelineError, PipelineOutcome, QueryTask, run_pipeline, task_rng
from .schema import Schema, load_schema

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

logger = logging.getLogger(__name__)


class BenchError(Exception):
    pass


class LayoutError(BenchError):
    pass


class ConfigError(BenchError):
    pass


class InvalidCount(BenchError):
    pass


# ---------------------------------------------------------------------------
# datasets


class DatasetIndex:
    """Tasks plus lazily loaded schemas of a BIRD-layout directory.

    Acts as the pipeline's schema store. ``problems`` lists task entries
    that could not be read as ``(position, reason)``.
    """

    def __init__(self, tasks: list[QueryTask], db_files: Mapping[str, Path],
                 description_dirs: Mapping[str, Path | None], problems: list | None = None,
                 padding: Sequence[Schema] = ()):
        self.tasks = tasks
        # extra prompt-only schemas appended to every foreign pool
        self.padding = list(padding)
        self.db_files = dict(db_files)
        self.description_dirs = dict(description_dirs)
        self.problems = list(problems or [])
        self._schemas: dict[str, Schema] = {}
        self._lock = threading.Lock()

    @property
    def db_ids(self) -> list[str]:
        return sorted(self.db_files)

    def schema(self, db_id: str) -> Schema:
        with self._lock:
            if db_id not in self._schemas:
                if db_id not in self.db_files:
                    raise LayoutError(f"no database folder for db_id {db_id!r}")
                self._schemas[db_id] = load_schema(self.db_files[db_id], self.description_dirs.get(db_id))
            return self._schemas[db_id]

    @property
    def schemas(self) -> dict[str, Schema]:
        return {db: self.schema(db) for db in self.db_ids}

    def db_path(self, db_id: str) -> Path:
        return self.db_files[db_id]

    def foreign_pool(self, db_id: str) -> list[Schema]:
        return [self.schema(db) for db in self.db_ids if db != db_id] + self.padding


_PAD_NOUNS = (
    "account", "asset", "batch", "branch", "campaign", "carrier", "contract", "device", "event",
    "facility", "invoice", "ledger", "license", "meter", "permit", "project", "region", "sensor",
    "shipment", "station", "survey", "ticket", "vendor", "voucher", "warehouse", "zone",
)
_PAD_FIELDS = (
    ("code", "TEXT", "identifying code"), ("label", "TEXT", "display label"),
    ("amount", "REAL", "monetary amount"), ("quantity", "INTEGER", "number of units"),
    ("created_on", "TEXT", "creation date"), ("status", "TEXT", "lifecycle status"),
    ("score", "REAL", "quality score"), ("owner", "TEXT", "responsible person"),
    ("category", "TEXT", "category name"), ("rank", "INTEGER", "ordinal rank"),
    ("notes", "TEXT", "free-form notes"), ("updated_on", "TEXT", "last update date"),
)


def padding_schemas(total_columns: int, columns_per_table: int = 8) -> list[Schema]:
    """Deterministic filler schemas with ``total_columns`` columns in all.

    They stand in for additional databases when a small dataset cannot
    supply enough irrelevant columns for high target rates; they are only
    ever rendered into prompts, never queried.
    """
    from .schema import Column, Table

    schemas, made, k = [], 0, 0
    while made < total_columns:
        width = min(columns_per_table, total_columns - made)
        noun = _PAD_NOUNS[k % len(_PAD_NOUNS)]
        tname = f"{noun}_{k // len(_PAD_NOUNS) + 1}"
        cols = [
            Column(f"{tname}_id", "INTEGER", f"identifier of the {noun} record", is_primary_key=True)
        ]
        for j in range(width - 1):
            name, typ, desc = _PAD_FIELDS[(j + k) % len(_PAD_FIELDS)]
            cols.append(Column(name, typ, f"{desc} of the {noun}"))
        schemas.append(Schema(f"padding_{k:04d}", (Table(tname, tuple(cols[:width])),)))
        made += width
        k += 1
    return schemas


def _find_sqlite(folder: Path, db_id: str) -> Path | None:
    preferred = folder / f"{db_id}.sqlite"
    if preferred.is_file():
        return preferred
    found = sorted(folder.glob("*.sqlite")) + sorted(folder.glob("*.db"))
    return found[0] if found else None


def load_dataset(dataset_dir: str | Path, split: str = "dev") -> DatasetIndex:
    """Read ``<split>.json`` and ``<split>_databases/<db_id>/`` under ``dataset_dir``."""
    root = Path(dataset_dir)
    task_file = root / f"{split}.json"
    db_root = root / f"{split}_databases"
    if not task_file.is_file():
        raise LayoutError(f"missing task file {task_file}")
    try:
        entries = json.loads(task_file.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise LayoutError(f"{task_file} is not valid JSON: {exc}") from exc
    if not isinstance(entries, list):
        raise LayoutError(f"{task_file} must hold a list of tasks")

    tasks, problems = [], []
    for pos, entry in enumerate(entries):
        try:
            tasks.append(
                QueryTask(
                    task_id=str(entry.get("question_id", pos)),
                    db_id=entry["db_id"],
                    question=entry["question"],
                    hint=entry.get("evidence") or "",
                    gold_sql=entry["SQL"],
                    difficulty=entry.get("difficulty", ""),
                )
            )
        except (KeyError, TypeError, AttributeError, PipelineError) as exc:
            problems.append((pos, f"{type(exc).__name__}: {exc}"))
    seen = set()
    for task in tasks:
        if task.task_id in seen:
            raise LayoutError(f"duplicate task id {task.task_id}")
        seen.add(task.task_id)

    db_files, desc_dirs = {}, {}
    referenced = sorted({t.db_id for t in tasks})
    folders = sorted(p.name for p in db_root.iterdir() if p.is_dir()) if db_root.is_dir() else []
    for db_id in sorted(set(referenced) | set(folders)):
        folder = db_root / db_id
        sqlite_file = _find_sqlite(folder, db_id) if folder.is_dir() else None
        if sqlite_file is None:
            if db_id in referenced:
                raise LayoutError(f"missing database folder or file for db_id {db_id!r} under {db_root}")
            continue
        db_files[db_id] = sqlite_file
        desc = folder / "database_description"
        desc_dirs[db_id] = desc if desc.is_dir() else None
    return DatasetIndex(tasks, db_files, desc_dirs, problems)


def sample_eval_set(index: DatasetIndex, fraction: float, seed: int) -> list[QueryTask]:
    """Stratified sample of ``ceil(fraction * n)`` tasks from every database, in dataset order."""
    if not 0 < fraction <= 1:
        raise BenchError(f"fraction must lie in (0, 1], got {fraction}")
    by_db: dict[str, list[int]] = {}
    for i, task in enumerate(index.tasks):
        by_db.setdefault(task.db_id, []).append(i)
    chosen: list[int] = []
    for db_id in sorted(by_db):
        positions = list(by_db[db_id])
        # rounding first keeps 0.1 * 30 from becoming 3.0000000000000004 -> 4
        take = math.ceil(round(fraction * len(positions), 9))
        task_rng(seed, "sample", db_id).shuffle(positions)
        chosen.extend(positions[:take])
    return [index.tasks[i] for i in sorted(chosen)]


def fpr_grid(n: int) -> list[float]:
    """``n`` target rates: ``n - 1`` log-spaced from 0.99 down to 0.01, then exactly 0.0."""
    if isinstance(n, bool) or not isinstance(n, int) or n < 2:
        raise InvalidCount(f"grid needs an integer n >= 2, got {n!r}")
    if n == 2:
        return [0.99, 0.0]
    hi, lo, steps = math.log(0.99), math.log(0.01), n - 2
    rates = [math.exp(hi + (lo - hi) * i / steps) for i in range(steps + 1)]
    rates[0], rates[-1] = 0.99, 0.01
    return rates + [0.0]


# ---------------------------------------------------------------------------
# experiment configuration


class ExperimentKind(str, enum.Enum):
    FPR_SWEEP = "FprSweep"
    LINKER_COMPARISON = "LinkerComparison"
    ABLATION = "Ablation"
    SINGLE_RUN = "SingleRun"


DEFAULT_STRATEGIES = (Strategy.FULL_SCHEMA, Strategy.SCSL, Strategy.HYSCSL, Strategy.TCSL, Strategy.HYTCSL)


@dataclass
class ExperimentSpec:
    kind: ExperimentKind
    dataset_dir: Path
    output_dir: Path
    sample_fraction: float = 0.10
    repeats: int = 1
    models: list[str] = field(default_factory=lambda: ["gpt-4o"])
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    seed: int = 0
    split: str = "dev"
    grid_n: int = 10
    strategies: list[Strategy] = field(default_factory=lambda: list(DEFAULT_STRATEGIES))
    base_model: str = "gpt-4o"
    workers: int = 1
    padding_columns: int = 0
    providers: dict = field(default_factory=lambda: {"kind": "openai"})

    def __post_init__(self) -> None:
        self.kind = ExperimentKind(self.kind)
        self.dataset_dir = Path(self.dataset_dir)
        self.output_dir = Path(self.output_dir)
        self.strategies = [Strategy(s) for s in self.strategies]
        if not 0 < self.sample_fraction <= 1:
            raise ConfigError(f"sample_fraction must lie in (0, 1], got {self.sample_fraction}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not self.models:
            raise ConfigError("at least one model is required")
        if self.kind is ExperimentKind.FPR_SWEEP:
            fpr_grid(self.grid_n)

    def snapshot(self) -> dict:
        """Configuration recorded in reports; excludes the output location so reruns elsewhere compare equal."""
        return {
            "kind": self.kind.value,
            "dataset_dir": str(self.dataset_dir),
            "split": self.split,
            "sample_fraction": self.sample_fraction,
            "repeats": self.repeats,
            "models": list(self.models),
            "seed": self.seed,
            "grid_n": self.grid_n,
            "strategies": [s.value for s in self.strategies],
            "base_model": self.base_model,
            "padding_columns": self.padding_columns,
            "pipeline": self.pipeline.to_dict(),
            "providers": {k: v for k, v in sorted(self.providers.items()) if "key" not in k.lower()},
        }


_PIPELINE_FIELDS = {f.name for f in dataclasses.fields(PipelineConfig)}


def _read_config_file(path: Path) -> dict:
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        return json.loads(text)
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def spec_from_mapping(data: Mapping[str, Any], base_dir: Path | None = None) -> ExperimentSpec:
    """Build an ExperimentSpec from the ``[dataset]``, ``[pipeline]``, ``[providers]`` and ``[experiment]`` sections."""
    unknown = set(data) - {"dataset", "pipeline", "providers", "experiment"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    dataset = dict(data.get("dataset", {}))
    experiment = dict(data.get("experiment", {}))
    pipeline = dict(data.get("pipeline", {}))
    bad = set(pipeline) - _PIPELINE_FIELDS
    if bad:
        raise ConfigError(f"unknown pipeline options: {sorted(bad)}")
    base_dir = base_dir or Path.cwd()

    def resolve(p: str | Path) -> Path:
        p = Path(p)
        return (p if p.is_absolute() else base_dir / p).resolve()

    if "dir" not in dataset:
        raise ConfigError("[dataset] needs 'dir'")
    try:
        providers = dict(data.get("providers", {"kind": "openai"}))
        for key in ("script", "record_to"):
            if key in providers:
                providers[key] = str(resolve(providers[key]))
        return ExperimentSpec(
            kind=experiment.pop("kind", "SingleRun"),
            dataset_dir=resolve(dataset.get("dir")),
            split=dataset.get("split", "dev"),
            sample_fraction=float(dataset.get("sample_fraction", 0.10)),
            padding_columns=int(dataset.get("padding_columns", 0)),
            output_dir=resolve(experiment.pop("output_dir", "runs")),
            pipeline=PipelineConfig(**pipeline),
            providers=providers,
            **experiment,
        )
    except (TypeError, ValueError, PipelineError, LinkerError) as exc:
        raise ConfigError(str(exc)) from exc


def load_spec(path: str | Path, overrides: Mapping[str, Any] | None = None) -> ExperimentSpec:
    """Load a TOML or JSON experiment file; ``overrides`` use ``section.key`` names."""
    path = Path(path)
    data = _read_config_file(path)
    for dotted, value in (overrides or {}).items():
        section_name, _, key = dotted.partition(".")
        data.setdefault(section_name, {})[key] = value
    return spec_from_mapping(data, path.parent)


def build_provider(providers: Mapping[str, Any], index: DatasetIndex | None = None) -> ChatProvider:
    """Instantiate the provider described by a ``[providers]`` section.

    Kinds: ``openai`` (HTTP through the rate-limited gateway), ``scripted``
    (a replay script file) and ``simulated`` (the offline simulator). A
    ``record_to`` path wraps the provider to capture a replay script.
    """
    kind = providers.get("kind", "openai")
    if kind == "openai":
        options = {k: v for k, v in providers.items() if k in {f.name for f in dataclasses.fields(ProviderConfig)}}
        config = ProviderConfig.from_env(**options)
        provider: ChatProvider = Gateway(OpenAICompatibleProvider(config), config)
    elif kind == "scripted":
        if "script" not in providers:
            raise ConfigError("scripted provider needs 'script'")
        provider = ScriptedProvider.from_file(providers["script"])
    elif kind == "simulated":
        if index is None:
            raise ConfigError("the simulated provider needs the dataset")
        from .simulate import SimulatedProvider

        options = {k: v for k, v in providers.items() if k not in {"kind", "record_to"}}
        provider = SimulatedProvider(index.tasks, index.schemas, **options)
    else:
        raise ConfigError(f"unknown provider kind {kind!r}")
    if providers.get("record_to"):
        provider = RecordingProvider(provider)
    return provider


# ---------------------------------------------------------------------------
# evaluation of one task


@dataclass(frozen=True)
class GoldRecord:
    result: ExecutionResult | None
    skip_reason: str = ""


def prepare_gold(task: QueryTask, index: DatasetIndex) -> GoldRecord:
    """Execute and parse the gold query once; failures mark the task as skipped."""
    try:
        extract_required_columns(task.gold_sql, index.schema(task.db_id))
    except OracleError as exc:
        return GoldRecord(None, f"oracle: {exc}")
    result = execute(task.gold_sql, index.db_path(task.db_id))
    if not result.ok:
        return GoldRecord(None, f"gold execution: {result.outcome.value} {result.message}".strip())
    return GoldRecord(result)


def evaluate_outcome(outcome: PipelineOutcome, gold: ExecutionResult, comparison: str = "multiset") -> QueryEvaluation:
    try:
        hit = results_match(outcome.execution, gold, comparison)
    except GoldExecutionFailed:
        hit = False
    return QueryEvaluation.from_sets(
        outcome.task_id, hit, outcome.retrieved.retrieved, outcome.required, outcome.provider_calls
    )


# ---------------------------------------------------------------------------
# report files


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", name).strip("-") or "run"


_PER_QUERY_FIELDS = ["task_id", "ex_hit", "fpr", "slr_hit", "retrieved_count", "required_count"]


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def emit_report(report: RunReport, output_dir: str | Path, formats: Sequence[str] = ("json", "csv")) -> list[Path]:
    """Write ``run_<id>.json`` and/or ``per_query_<id>.csv``; content depends only on ``report``."""
    out = Path(output_dir)
    rid = _safe(report.run_id)
    paths = []
    unknown = set(formats) - {"json", "csv"}
    if unknown:
        raise BenchError(f"unknown report formats {sorted(unknown)}")
    if "json" in formats:
        text = json.dumps(report.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"
        paths.append(_write(out / f"run_{rid}.json", text))
    if "csv" in formats:
        rows = [[getattr(e, f) for f in _PER_QUERY_FIELDS] for e in report.per_query]
        paths.append(_write(out / f"per_query_{rid}.csv", _csv_text(_PER_QUERY_FIELDS, rows)))
    return paths


def load_report(path: str | Path) -> RunReport:
    return RunReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def emit_curve(model: str, points: Sequence[CurvePoint], output_dir: str | Path) -> Path:
    ordered = sorted(points, key=lambda p: (-p.fpr, p.accuracy))
    rows = [[p.fpr, p.accuracy] for p in ordered]
    return _write(Path(output_dir) / f"curve_{_safe(model)}.csv", _csv_text(["fpr", "accuracy"], rows))


def read_curve(path: str | Path) -> list[CurvePoint]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [CurvePoint(float(r["fpr"]), float(r["accuracy"])) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# checkpoints


class Checkpoint:
    """Append-only JSONL of finished tasks for one run; lets interrupted runs resume."""

    def __init__(self, path: Path):
        self.path = path
        self.done: dict[str, dict] = {}
        self._lock = threading.Lock()
        if path.is_file():
            for line in path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError:
                    # a torn final line from an interrupted write
                    continue
                self.done[record["task_id"]] = record

    def add(self, record: dict) -> None:
        with self._lock:
            self.done[record["task_id"]] = record
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunResult:
    report: RunReport
    skipped: list[tuple[str, str]]


class Runner:
    """Executes pipeline runs over a task list with checkpointing and a worker pool."""

    def __init__(self, spec: ExperimentSpec, index: DatasetIndex, provider: ChatProvider,
                 stop_after: int | None = None):
        self.spec = spec
        self.index = index
        self.provider = provider
        self.tasks = sample_eval_set(index, spec.sample_fraction, spec.seed)
        self.gold: dict[str, GoldRecord] = {}
        # test hook: simulate an interruption after this many new tasks
        self.stop_after = stop_after
        self._new = 0
        self._new_lock = threading.Lock()

    def gold_for(self, task: QueryTask) -> GoldRecord:
        if task.task_id not in self.gold:
            self.gold[task.task_id] = prepare_gold(task, self.index)
        return self.gold[task.task_id]

    def _one(self, task: QueryTask, config: PipelineConfig) -> dict:
        gold = self.gold_for(task)
        if gold.result is None:
            return {"task_id": task.task_id, "skipped": gold.skip_reason}
        outcome = run_pipeline(task, self.index, config, self.provider)
        if outcome.retrieved is None:
            return {"task_id": task.task_id, "skipped": f"pipeline: {outcome.failure}"}
        evaluation = evaluate_outcome(outcome, gold.result, config.comparison)
        record = {"task_id": task.task_id, "eval": dataclasses.asdict(evaluation)}
        if outcome.failure:
            record["failure"] = outcome.failure
        return record

    def run(self, run_id: str, config: PipelineConfig, labels: dict) -> RunResult:
        checkpoint = Checkpoint(self.spec.output_dir / "checkpoints" / f"{_safe(run_id)}.jsonl")
        todo = [t for t in self.tasks if t.task_id not in checkpoint.done]
        for task in todo:
            self.gold_for(task)

        def work(task: QueryTask) -> None:
            with self._new_lock:
                if self.stop_after is not None and self._new >= self.stop_after:
                    raise KeyboardInterrupt("simulated interruption")
                self._new += 1
            checkpoint.add(self._one(task, config))

        if self.spec.workers == 1:
            for task in todo:
                work(task)
        else:
            with ThreadPoolExecutor(self.spec.workers) as pool:
                for future in [pool.submit(work, t) for t in todo]:
                    future.result()

        evals, skipped = [], []
        for task in self.tasks:
            record = checkpoint.done[task.task_id]
            if "skipped" in record:
                skipped.append((task.task_id, record["skipped"]))
            else:
                evals.append(QueryEvaluation(**record["eval"]))
        snapshot = self.spec.snapshot()
        snapshot["run_pipeline"] = config.to_dict()
        report = RunReport.build(run_id, snapshot, evals, config.seed, labels)
        return RunResult(report, skipped)


def _pct_cell(values: Sequence[float]) -> tuple[float, float]:
    mean, sd = mean_std(values)
    return round_pct(mean), round_pct(sd)


def ablation_variants(base: PipelineConfig, base_model: str) -> list[tuple[str, PipelineConfig]]:
    replace = dataclasses.replace
    return [
        ("full_pipeline", base),
        ("without_augmentation", replace(base, augmentation_enabled=False)),
        ("without_selection", replace(base, selection_k=1)),
        ("without_correction", replace(base, correction_max_rounds=0)),
        ("with_tcsl", replace(base, linker_strategy=Strategy.TCSL)),
        ("with_scsl", replace(base, linker_strategy=Strategy.SCSL)),
        ("base_model", replace(base, generation_model=base_model)),
    ]


def run_experiment(spec: ExperimentSpec, provider: ChatProvider | None = None,
                   index: DatasetIndex | None = None, stop_after: int | None = None) -> list[Path]:
    """Run ``spec`` and write its report files; returns the written paths (sorted)."""
    if index is None:
        index = load_dataset(spec.dataset_dir, spec.split)
        index.padding = padding_schemas(spec.padding_columns) if spec.padding_columns else []
    provider = provider or build_provider(spec.providers, index)
    runner = Runner(spec, index, provider, stop_after)
    out = spec.output_dir
    written: list[Path] = []
    all_skipped: dict[str, str] = {}

    def do_run(run_id: str, config: PipelineConfig, labels: dict) -> RunReport:
        result = runner.run(run_id, config, labels)
        written.extend(emit_report(result.report, out))
        all_skipped.update(result.skipped)
        return result.report

    summary: dict[str, Any] = {"kind": spec.kind.value, "config": spec.snapshot()}
    replace = dataclasses.replace

    if spec.kind is ExperimentKind.FPR_SWEEP:
        grid = fpr_grid(spec.grid_n)
        summary["grid"] = grid
        summary["models"] = {}
        for model in spec.models:
            points = []
            for rate in grid:
                accs, fprs = [], []
                for r in range(spec.repeats):
                    config = PipelineConfig.simplified(
                        **{**spec.pipeline.to_dict(), "augmentation_enabled": False, "selection_k": 1,
                           "correction_max_rounds": 0, "linker_strategy": Strategy.MOCKED_FPR,
                           "target_fpr": rate, "generation_model": model, "seed": spec.seed + r}
                    )
                    rid = f"sweep_{model}_fpr{rate:.6f}_rep{r}"
                    report = do_run(rid, config, {"model": model, "target_fpr": rate, "repeat": r})
                    if report.per_query:
                        accs.append(report.ex_pct)
                        fprs.append(report.mean_fpr)
                if accs:
                    points.append(CurvePoint(math.fsum(fprs) / len(fprs), math.fsum(accs) / len(accs)))
            written.append(emit_curve(model, points, out))
            entry = {"points": [[p.fpr, p.accuracy] for p in sorted(points, key=lambda p: -p.fpr)]}
            try:
                entry["sensitivity"] = sensitivity(points)
            except ValueError as exc:
                entry["sensitivity"] = None
                entry["note"] = str(exc)
            summary["models"][model] = entry

    elif spec.kind is ExperimentKind.LINKER_COMPARISON:
        rows = []
        for strategy in spec.strategies:
            ex, fpr, slr = [], [], []
            for r in range(spec.repeats):
                config = PipelineConfig.simplified(
                    **{**spec.pipeline.to_dict(), "augmentation_enabled": False, "selection_k": 1,
                       "correction_max_rounds": 0, "linker_strategy": strategy, "seed": spec.seed + r}
                )
                report = do_run(f"linker_{strategy.value}_rep{r}", config, {"strategy": strategy.value, "repeat": r})
                if report.per_query:
                    ex.append(report.ex_pct)
                    fpr.append(100.0 * report.mean_fpr)
                    slr.append(report.slr_pct)
            if ex:
                rows.append([strategy.value, *_pct_cell(fpr), *_pct_cell(slr), *_pct_cell(ex), len(ex)])
        header = ["strategy", "fpr_mean", "fpr_std", "slr_mean", "slr_std", "ex_mean", "ex_std", "runs"]
        written.append(_write(out / "linkers.csv", _csv_text(header, rows)))
        summary["linkers"] = [dict(zip(header, row)) for row in rows]

    elif spec.kind is ExperimentKind.ABLATION:
        rows = []
        full_ex = None
        for name, variant in ablation_variants(spec.pipeline, spec.base_model):
            ex = []
            for r in range(spec.repeats):
                config = replace(variant, seed=spec.seed + r)
                report = do_run(f"ablation_{name}_rep{r}", config, {"variant": name, "repeat": r})
                if report.per_query:
                    ex.append(report.ex_pct)
            mean = mean_std(ex)[0] if ex else float("nan")
            if full_ex is None:
                full_ex = mean
            rows.append([name, round_pct(mean), round_pct(mean - full_ex)])
        header = ["variant", "ex", "delta"]
        written.append(_write(out / "ablation.csv", _csv_text(header, rows)))
        summary["ablation"] = [dict(zip(header, row)) for row in rows]

    else:
        for r in range(spec.repeats):
            do_run(f"single_rep{r}", replace(spec.pipeline, seed=spec.seed + r), {"repeat": r})

    skipped_rows = sorted(all_skipped.items(), key=lambda kv: kv[0])
    written.append(_write(out / "skipped.csv", _csv_text(["task_id", "reason"], skipped_rows)))
    summary["skipped"] = len(skipped_rows)
    summary_path = out / f"summary_{spec.kind.value}.json"
    written.append(_write(summary_path, json.dumps(summary, indent=2, sort_keys=True, default=str) + "\n"))
    if isinstance(provider, RecordingProvider) and spec.providers.get("record_to"):
        provider.save(spec.providers["record_to"])
    return sorted(set(written))


def report_files(output_dir: str | Path) -> dict[str, bytes]:
    """Every report file under ``output_dir`` (checkpoints excluded), keyed by relative path."""
    root = Path(output_dir)
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and "checkpoints" not in p.relative_to(root).parts
    }

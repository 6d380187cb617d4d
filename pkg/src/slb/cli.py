"""Command line entry point: ``slb <command> ...``.

Every flag falls back to an ``SLB_<FLAG>`` environment variable (dashes
become underscores), e.g. ``SLB_SEED=7 slb sample --dataset data``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
from pathlib import Path
from typing import Sequence

from . import bench
from .executor import DEFAULT_TIMEOUT, execute, format_tsv
from .oracle import OracleError, column_drop_oracle, extract_required_columns
from .pipeline import build_finetune_triples, to_chat_records
from .schema import SchemaError, load_schema
from .toy import build_toy_dataset


def _env(flag: str, default=None, cast=str):
    raw = os.environ.get("SLB_" + flag.upper().replace("-", "_"))
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError:
        raise SystemExit(f"bad value for SLB_{flag.upper().replace('-', '_')}: {raw!r}")


def _flag(parser: argparse.ArgumentParser, flag: str, cast=str, default=None, required=False, **kw):
    value = _env(flag, default, cast)
    parser.add_argument(
        f"--{flag}", type=cast, default=value, required=required and value is None, **kw
    )


def _parse_override(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep or "." not in key:
        raise argparse.ArgumentTypeError(f"expected section.key=value, got {text!r}")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return key.strip(), parsed


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slb", description="Schema-linking text-to-SQL benchmark harness")
    parser.add_argument("-v", "--verbose", action="store_true", default=bool(_env("verbose", "")))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment from a TOML/JSON config")
    _flag(p, "config", Path, required=True)
    _flag(p, "output-dir", Path)
    _flag(p, "workers", int)
    _flag(p, "seed", int)
    _flag(p, "ex-compare", str, choices=["multiset", "set"])
    p.add_argument("--set", dest="overrides", action="append", type=_parse_override, default=[],
                   metavar="SECTION.KEY=VALUE", help="override a config value (repeatable)")

    p = sub.add_parser("oracle", help="required-column extraction")
    osub = p.add_subparsers(dest="oracle_command", required=True)
    e = osub.add_parser("extract", help="print the columns a query reads")
    _flag(e, "db", Path, required=True)
    _flag(e, "sql", str, required=True)
    _flag(e, "descriptions", Path)
    e.add_argument("--verify", action="store_true", help="cross-check with the column-drop oracle")

    p = sub.add_parser("exec", help="execute a query read-only and print the rows as TSV")
    _flag(p, "db", Path, required=True)
    _flag(p, "sql", str, required=True)
    _flag(p, "timeout", float, DEFAULT_TIMEOUT)

    p = sub.add_parser("sample", help="print a stratified evaluation sample")
    _flag(p, "dataset", Path, required=True)
    _flag(p, "split", str, "dev")
    _flag(p, "fraction", float, 0.1)
    _flag(p, "seed", int, 0)

    p = sub.add_parser("grid", help="print the FPR grid")
    _flag(p, "n", int, 10)

    p = sub.add_parser("finetune-export", help="write chat-format training records")
    _flag(p, "dataset", Path, required=True)
    _flag(p, "split", str, "dev")
    _flag(p, "n", int, 500)
    _flag(p, "seed", int, 0)
    _flag(p, "out", Path, Path("finetune.jsonl"))

    p = sub.add_parser("toy-dataset", help="materialize the bundled toy dataset")
    _flag(p, "out", Path, Path("toy_data"))
    return parser


def _cmd_run(args) -> int:
    overrides = dict(args.overrides)
    if args.output_dir is not None:
        overrides["experiment.output_dir"] = str(args.output_dir.resolve())
    if args.workers is not None:
        overrides["experiment.workers"] = args.workers
    if args.seed is not None:
        overrides["experiment.seed"] = args.seed
    if args.ex_compare is not None:
        overrides["pipeline.comparison"] = args.ex_compare
    spec = bench.load_spec(args.config, overrides)
    paths = bench.run_experiment(spec)
    for path in paths:
        print(path)
    return 0


def _cmd_oracle(args) -> int:
    schema = load_schema(args.db, args.descriptions)
    deps = extract_required_columns(args.sql, schema)
    for ref in deps.sorted_refs():
        print(ref)
    if deps.unresolved:
        print("# unresolved: " + ", ".join(deps.unresolved), file=sys.stderr)
        return 1
    if args.verify:
        dropped = column_drop_oracle(args.sql, schema, args.db)
        agree = dropped.refs == deps.refs
        print(f"# column-drop oracle {'agrees' if agree else 'DISAGREES'}", file=sys.stderr)
        if not agree:
            print("# drop oracle: " + ", ".join(map(str, dropped.sorted_refs())), file=sys.stderr)
            return 1
    return 0


def _cmd_exec(args) -> int:
    result = execute(args.sql, args.db, args.timeout)
    print(format_tsv(result))
    return 0 if result.ok else 1


def _cmd_sample(args) -> int:
    index = bench.load_dataset(args.dataset, args.split)
    for task in bench.sample_eval_set(index, args.fraction, args.seed):
        print(f"{task.task_id}\t{task.db_id}\t{task.question}")
    return 0


def _cmd_grid(args) -> int:
    for rate in bench.fpr_grid(args.n):
        print(repr(rate))
    return 0


def _cmd_finetune(args) -> int:
    index = bench.load_dataset(args.dataset, args.split)
    skipped: list = []
    n = min(args.n, len(index.tasks))
    triples = build_finetune_triples(index.tasks, index, random.Random(args.seed), n, skipped)
    records = to_chat_records(triples)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
    print(f"wrote {len(records)} records to {args.out}; skipped {len(skipped)}")
    for task_id, reason in skipped:
        print(f"skipped {task_id}: {reason}", file=sys.stderr)
    return 0


def _cmd_toy(args) -> int:
    print(build_toy_dataset(args.out))
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "oracle": _cmd_oracle,
    "exec": _cmd_exec,
    "sample": _cmd_sample,
    "grid": _cmd_grid,
    "finetune-export": _cmd_finetune,
    "toy-dataset": _cmd_toy,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (bench.BenchError, OracleError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

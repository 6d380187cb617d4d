"""Shared setup for the example scripts: toy data plus the offline simulator."""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from slb.bench import load_spec, run_experiment
from slb.toy import build_toy_dataset

ROOT = Path(__file__).resolve().parents[1]


def parse_args(description: str, config: str) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description=description)
    parser.add_argument("--config", type=Path, default=ROOT / "configs" / config)
    parser.add_argument("--out", type=Path, default=None, help="report directory (defaults to the config's)")
    parser.add_argument("--seed", type=int, default=None)
    return parser.parse_args()


def run(args: argparse.Namespace) -> dict:
    toy = ROOT / "toy_data"
    if not (toy / "dev.json").is_file():
        build_toy_dataset(toy)
    overrides = {}
    if args.out is not None:
        overrides["experiment.output_dir"] = str(args.out.resolve())
    if args.seed is not None:
        overrides["experiment.seed"] = args.seed
        overrides["providers.seed"] = args.seed
    spec = load_spec(args.config, overrides)
    run_experiment(spec)
    summary = json.loads((spec.output_dir / f"summary_{spec.kind.value}.json").read_text(encoding="utf-8"))
    print(f"reports in {spec.output_dir}")
    return summary

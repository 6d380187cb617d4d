"""Bundled three-database toy dataset in BIRD layout."""

from __future__ import annotations

import json
import shutil
import sqlite3
from importlib import resources
from pathlib import Path

TOY_DATABASES = ("california_schools", "retail", "university")


def _data_dir():
    return resources.files("slb") / "data" / "toy"


def toy_tasks() -> list[dict]:
    return json.loads((_data_dir() / "dev.json").read_text(encoding="utf-8"))


def build_toy_dataset(out_dir: str | Path) -> Path:
    """Materialize the toy dataset under ``out_dir`` and return that directory.

    Layout: ``dev.json`` plus ``dev_databases/<db>/<db>.sqlite`` and
    ``dev_databases/<db>/database_description/<table>.csv``. Existing
    database files are rebuilt from the bundled SQL scripts.
    """
    out = Path(out_dir)
    data = _data_dir()
    for db_id in TOY_DATABASES:
        db_dir = out / "dev_databases" / db_id
        desc_dir = db_dir / "database_description"
        desc_dir.mkdir(parents=True, exist_ok=True)
        db_file = db_dir / f"{db_id}.sqlite"
        if db_file.exists():
            db_file.unlink()
        conn = sqlite3.connect(db_file)
        try:
            conn.executescript((data / f"{db_id}.sql").read_text(encoding="utf-8"))
            conn.commit()
        finally:
            conn.close()
        for csv_file in (data / "descriptions" / db_id).iterdir():
            if csv_file.name.endswith(".csv"):
                with resources.as_file(csv_file) as src:
                    shutil.copyfile(src, desc_dir / csv_file.name)
    (out / "dev.json").write_text(json.dumps(toy_tasks(), indent=2), encoding="utf-8")
    return out

"""Prompt templates: plain-text files with ``[system]``/``[user]`` sections and named placeholders.

Every bundled template can be overridden by placing a file of the same name
in a directory passed as ``override_dir``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

_BLANK_RUNS = re.compile(r"\n{3,}")


@dataclass(frozen=True)
class Template:
    name: str
    system: str
    user: str

    def render(self, **fields: str) -> tuple[str, str]:
        return _tidy(self.system.format_map(fields)), _tidy(self.user.format_map(fields))


def _tidy(text: str) -> str:
    # optional sections render as empty strings; collapse the gaps they leave
    return _BLANK_RUNS.sub("\n\n", text).strip()


def _parse(name: str, text: str) -> Template:
    parts = re.split(r"^\[(system|user)\]\s*$", text, flags=re.M)
    sections = {parts[i]: parts[i + 1].strip("\n") for i in range(1, len(parts) - 1, 2)}
    if "user" not in sections:
        raise ValueError(f"template {name!r} has no [user] section")
    return Template(name, sections.get("system", ""), sections["user"])


@lru_cache(maxsize=None)
def _read(name: str, override_dir: str | None) -> str:
    if override_dir is not None:
        candidate = Path(override_dir) / name
        if candidate.is_file():
            return candidate.read_text(encoding="utf-8")
    return (resources.files(__name__) / name).read_text(encoding="utf-8")


def load_template(name: str, override_dir: str | Path | None = None) -> Template:
    return _parse(name, _read(f"{name}.txt", str(override_dir) if override_dir else None))


def load_text(name: str, override_dir: str | Path | None = None) -> str:
    return _read(f"{name}.txt", str(override_dir) if override_dir else None).strip()


def generation_headers(override_dir: str | Path | None = None) -> list[str]:
    text = load_text("generation_headers", override_dir)
    return [h.strip() for h in re.split(r"^---\s*$", text, flags=re.M) if h.strip()]


def section(title: str, body: str) -> str:
    """A ``### title`` block, or an empty string when ``body`` is blank."""
    body = body.strip()
    return f"### {title}\n{body}" if body else ""

"""Prompt templates, one text file per stage tag.

A template holds a ``[system]`` section and a ``[user]`` section. Placeholders
look like ``{{question}}`` and are filled in a single pass, so substituted text
is never expanded again.
"""

from __future__ import annotations

import re
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional, Tuple, Union

from ..errors import ConfigError

PLACEHOLDERS = ("question", "keypoints", "group", "evidence", "conclusions", "chain", "options")
_PLACEHOLDER_RE = re.compile(r"\{\{(\w+)\}\}")
_SECTION_RE = re.compile(r"^\[(system|user)\]\s*$", re.MULTILINE)


@lru_cache(maxsize=None)
def _read(name: str, prompts_dir: Optional[str]) -> Tuple[str, str]:
    if prompts_dir:
        path = Path(prompts_dir) / f"{name}.txt"
        if not path.exists():
            raise ConfigError(f"prompt template not found: {path}")
        raw = path.read_text(encoding="utf-8")
    else:
        raw = resources.files(__package__).joinpath(f"{name}.txt").read_text(encoding="utf-8")
    parts = _SECTION_RE.split(raw)
    sections = dict(zip(parts[1::2], (p.strip("\n") for p in parts[2::2])))
    if "user" not in sections:
        raise ConfigError(f"template {name!r} has no [user] section")
    return sections.get("system", ""), sections["user"]


def render(name: str, prompts_dir: Optional[Union[str, Path]] = None, **values: str) -> Tuple[str, str]:
    """Return ``(system_prompt, user_prompt)`` for template ``name``."""
    system, user = _read(name, str(prompts_dir) if prompts_dir else None)

    def fill(m: re.Match) -> str:
        return str(values.get(m.group(1), ""))

    return _PLACEHOLDER_RE.sub(fill, system), _PLACEHOLDER_RE.sub(fill, user)

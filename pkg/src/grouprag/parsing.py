"""Pulling structured payloads out of free-form model replies."""

from __future__ import annotations

import json
import re
from typing import Any, Iterable, Optional

_DECODER = json.JSONDecoder()
_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def find_json(text: str, kind: type) -> Optional[Any]:
    """First JSON value of type ``kind`` (dict or list) embedded in ``text``.

    Tries fenced code blocks first, then scans for an opening bracket and
    decodes from there. Returns None when nothing decodes.
    """
    if not isinstance(text, str):
        return None
    opener = "{" if kind is dict else "["
    candidates = [m.group(1) for m in _FENCE_RE.finditer(text)] + [text]
    for blob in candidates:
        pos = blob.find(opener)
        while pos != -1:
            try:
                value, _ = _DECODER.raw_decode(blob, pos)
            except (json.JSONDecodeError, RecursionError):
                value = None
            if isinstance(value, kind):
                return value
            pos = blob.find(opener, pos + 1)
    return None


_ANSWER_RE = re.compile(r"(?i:\banswer(?:\s+is)?)\s*[:\-]?\s*(?i:option\s*)?\(?\s*([A-Z])\s*\)?(?![A-Za-z0-9])")
_PAREN_RE = re.compile(r"\(([A-Z])\)")
_BARE_RE = re.compile(r"(?<![A-Za-z0-9])([A-Z])(?![A-Za-z0-9])")


def scan_option_letter(text: str, letters: Iterable[str]) -> Optional[str]:
    """Best-effort option letter from prose.

    Order: an explicit "answer is X", then a unique parenthesised "(X)", then a
    unique standalone capital letter. Ambiguity at a level yields None there.
    """
    allowed = set(letters)
    for m in _ANSWER_RE.finditer(text):
        if m.group(1) in allowed:
            return m.group(1)
    for pattern in (_PAREN_RE, _BARE_RE):
        found = {m.group(1) for m in pattern.finditer(text)} & allowed
        if len(found) == 1:
            return found.pop()
        if len(found) > 1:
            return None
    return None

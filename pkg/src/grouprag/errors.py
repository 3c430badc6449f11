"""Exception hierarchy shared by every grouprag module."""

from __future__ import annotations


class GroupRAGError(Exception):
    """Base class for all grouprag errors."""


class InputError(GroupRAGError, ValueError):
    """Caller passed something that violates an operation's preconditions."""


class ConfigError(InputError):
    """Run configuration is invalid or references missing files."""


class BackendError(GroupRAGError):
    """An LLM backend failed after exhausting its retries."""

    def __init__(self, message: str, attempt_count: int = 1) -> None:
        super().__init__(message)
        self.attempt_count = attempt_count


class ScriptError(GroupRAGError):
    """A mock script had no rule for a request and no default response."""


class StageError(GroupRAGError):
    """A pipeline stage could not produce a usable output."""

    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f"{stage}: {message}")
        self.stage = stage


class TrainingError(GroupRAGError):
    """Policy training hit a non-finite value."""

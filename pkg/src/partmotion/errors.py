"""Exception types shared across the package.

Every error carries a short machine-readable ``code`` (e.g. ``"OVERLAP"``)
and an optional ``detail`` payload; the CLI serializes both to stderr.
"""

from __future__ import annotations

from typing import Any


class PartMotionError(Exception):
    exit_code = 3

    def __init__(self, code: str, message: str = "", detail: Any = None):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.message = message
        self.detail = detail

    def to_dict(self) -> dict:
        out = {"error": self.code, "message": self.message}
        if self.detail is not None:
            out["detail"] = self.detail
        return out


class AnnotationError(PartMotionError):
    exit_code = 1


class AgentError(PartMotionError):
    pass


class AgentParseError(AgentError):
    """Raised by the response parser; ``detail`` holds the offending fragment."""


class TemplateError(AgentError):
    exit_code = 2


class RepresentationError(PartMotionError):
    pass


class ConditioningError(PartMotionError):
    pass


class DiffusionError(PartMotionError):
    pass


class EvaluationError(PartMotionError):
    pass


class ConfigError(PartMotionError):
    exit_code = 2

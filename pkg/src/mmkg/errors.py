"""Exception types shared across the pipeline stages."""

from __future__ import annotations


class MMKGError(Exception):
    """Base class for all package errors."""


class ValidationError(MMKGError, ValueError):
    pass


class NotFoundError(MMKGError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ""


class ParameterError(MMKGError, ValueError):
    pass


class StoreParseError(MMKGError, ValueError):
    """A persisted store could not be decoded."""

    def __init__(self, path, key: str, reason: str):
        self.path = str(path)
        self.key = key
        self.reason = reason
        super().__init__(f"{self.path}: bad key {key!r}: {reason}")


class TemplateError(MMKGError, KeyError):
    def __init__(self, template_id: str, missing: list[str] | None = None, reason: str = ""):
        self.template_id = template_id
        self.missing = list(missing or [])
        if self.missing:
            msg = f"template {template_id!r} is missing binding(s): {', '.join(self.missing)}"
        else:
            msg = f"template {template_id!r}: {reason}"
        super().__init__(msg)

    def __str__(self) -> str:
        return str(self.args[0])


class GatewayError(MMKGError):
    """Model call failed after exhausting retries."""

    def __init__(self, message: str, attempts: int):
        self.attempts = attempts
        super().__init__(f"{message} (after {attempts} attempt(s))")


class InputError(MMKGError, ValueError):
    pass


class PrerequisiteError(MMKGError):
    def __init__(self, stage: str, missing: list[str]):
        self.stage = stage
        self.missing = list(missing)
        super().__init__(
            f"stage {stage!r} requires missing artifact(s): {', '.join(self.missing)}"
        )

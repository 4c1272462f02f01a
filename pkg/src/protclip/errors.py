"""Exception hierarchy shared across the package."""

from __future__ import annotations


class ProtclipError(Exception):
    """Base class for all package errors."""


class ValidationError(ProtclipError, ValueError):
    """Input or configuration failed validation (CLI exit code 2)."""


class InvalidRecord(ValidationError):
    def __init__(self, reason: str, detail: str = "") -> None:
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason}: {detail}" if detail else reason)


class UnknownCharacter(ValidationError):
    pass


class EmptySequence(ValidationError):
    pass


class MalformedRecord(ValidationError):
    def __init__(self, line: int, reason: str, detail: str = "") -> None:
        self.line = line
        self.reason = reason
        self.detail = detail
        msg = f"line {line}: {reason}"
        super().__init__(f"{msg} ({detail})" if detail else msg)


class IoFailure(ProtclipError, OSError):
    """Reading or writing an artifact failed (CLI exit code 1)."""


class EmptyCorpus(ValidationError):
    pass


class EmptyCluster(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class WeightConstraintViolation(ConfigError):
    pass


class ShapeMismatch(ProtclipError, ValueError):
    pass


class NonFinite(ProtclipError, FloatingPointError):
    pass


class NotScalar(ProtclipError, ValueError):
    pass


class DetachedTensor(ProtclipError, RuntimeError):
    pass


class TooLong(ValidationError):
    pass


class SpanOutOfRange(ValidationError):
    pass


class BatchTooSmall(ValidationError):
    pass


class EmptyMask(ProtclipError):
    """Raised when a loss is asked to score zero masked positions."""


class InvariantBreach(ProtclipError, AssertionError):
    """An internal invariant did not hold (CLI exit code 3)."""

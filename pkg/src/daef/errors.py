"""Exception hierarchy shared by every daef module."""

from __future__ import annotations


class DaefError(Exception):
    """Base class for all library errors."""


# numeric / linear algebra
class NonFiniteInput(DaefError, ValueError):
    pass


class ShapeMismatch(DaefError, ValueError):
    pass


class EmptyInput(DaefError, ValueError):
    pass


class RankOutOfRange(DaefError, ValueError):
    pass


class DomainError(DaefError, ValueError):
    pass


class SingularSystem(DaefError, ArithmeticError):
    pass


# model
class InvalidArchitecture(DaefError, ValueError):
    pass


class InsufficientSamples(DaefError, ValueError):
    pass


class VersionMismatch(DaefError):
    pass


class SchemaError(DaefError, ValueError):
    pass


class CorruptPayload(DaefError, ValueError):
    pass


# federation
class UnknownSession(DaefError, KeyError):
    pass


class PayloadTooLarge(DaefError, ValueError):
    pass


class NodeTimeout(DaefError, TimeoutError):
    pass


class SessionAborted(DaefError, RuntimeError):
    pass


class ArchitectureMismatch(DaefError, ValueError):
    pass


class SeedMismatch(DaefError, ValueError):
    pass


# anomaly / data
class TooFewSamples(DaefError, ValueError):
    pass


class LengthMismatch(DaefError, ValueError):
    pass


class NoPositives(DaefError, ValueError):
    pass


class InsufficientAnomalies(DaefError, ValueError):
    pass


class TooManyPartitions(DaefError, ValueError):
    pass


class ParseError(DaefError, ValueError):
    def __init__(self, message: str, row: int | None = None, col: int | None = None):
        super().__init__(message)
        self.row = row
        self.col = col


class NonNumericFeature(ParseError):
    pass


class MissingLabelColumn(DaefError, KeyError):
    pass


def with_context(exc: Exception, prefix: str, **attrs) -> Exception:
    """Copy of ``exc`` (same type) whose message is prefixed with ``prefix``."""
    try:
        tagged = type(exc)(f"{prefix}: {exc}")
    except TypeError:
        tagged = DaefError(f"{prefix}: {exc}")
    for key, value in attrs.items():
        setattr(tagged, key, value)
    return tagged

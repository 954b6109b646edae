"""Exception hierarchy shared by every module."""

from __future__ import annotations


class ModerError(Exception):
    """Base class for all package errors."""


class ContractError(ModerError, ValueError):
    """A precondition on arguments was violated."""


class DimensionError(ContractError):
    """Array shapes do not chain."""

    def __init__(self, message: str, layer: int | None = None):
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
        self.layer = layer


class DomainError(ModerError, ValueError):
    """Input outside the mathematical domain of an operation (e.g. a zero vector)."""


class UsageError(ModerError, RuntimeError):
    """API used in an invalid order, e.g. backward on a consumed graph."""


class TrainingDivergenceError(ModerError, ArithmeticError):
    """A loss or parameter became non-finite during training."""


class UnknownClassError(ModerError, KeyError):
    """A class-id is not known to the object queried."""


class FormatError(ModerError, ValueError):
    """A serialized file failed validation (magic, version, fingerprint, length)."""


class UndefinedMetricError(ModerError, ValueError):
    """A metric is not defined for the given accuracy matrix (e.g. T < 2)."""


class ConfigError(ModerError, ValueError):
    """A run configuration failed to parse or validate; the message names the field."""

"""Exception types raised by meanfield_repr."""
from __future__ import annotations

from typing import Any, Optional


class MeanFieldReprError(Exception):
    """Base class for all package errors."""


class TreeError(MeanFieldReprError, ValueError):
    """Malformed scenario tree or an invalid node / time reference."""


class GeneratorError(MeanFieldReprError, ValueError):
    """A generator is not strictly increasing or cannot be inverted."""


class EnumerationRefused(MeanFieldReprError, ValueError):
    """Exhaustive enumeration would exceed the configured size guard."""

    def __init__(self, message: str, paths: int, limit: int) -> None:
        super().__init__(message)
        self.paths = paths
        self.limit = limit


class RepresentationError(MeanFieldReprError, ValueError):
    """Inputs to a representation solver are inconsistent."""


class OrderViolation(MeanFieldReprError):
    """Two consecutive iterates of a monotone scheme are not ordered."""

    def __init__(self, message: str, previous: Any = None, current: Any = None) -> None:
        super().__init__(message)
        self.previous = previous
        self.current = current


class AdapterError(MeanFieldReprError, ValueError):
    """A mean-field adapter returned data violating its contract."""


class ConfigError(MeanFieldReprError, ValueError):
    """Configuration could not be parsed or failed validation."""

    def __init__(self, message: str, location: Optional[str] = None) -> None:
        super().__init__(message if location is None else f"{location}: {message}")
        self.location = location

"""Exception taxonomy shared by every gapscan module.

Each failure mode raises a distinct subclass of :class:`GapscanError` so
callers (and the CLI exit-code mapping) can tell configuration mistakes
apart from bad data and from genuine runtime faults.
"""

from __future__ import annotations


class GapscanError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(GapscanError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigurationError(GapscanError):
    """A config value is structurally invalid (even kernel, bad flag, ...)."""


class DataError(GapscanError):
    """Input data violates a documented precondition (negative gap,
    truncated payload, manifest/shape mismatch, ...)."""


class NumericError(GapscanError):
    """A non-finite value appeared where a finite one is required."""


class SingularityError(GapscanError):
    """Discretization was requested at a singular pole (lambda == 0)."""


class EmptyReductionError(GapscanError):
    """A masked reduction received an all-false mask."""


class UndefinedMetricError(GapscanError):
    """The metric is undefined on this input (no comparable pairs,
    single-class labels)."""


class MeasurementError(GapscanError):
    """A benchmark measurement cannot be trusted (timer too coarse)."""


class TapeError(GapscanError):
    """Gradient-tape misuse (backward twice without a new forward)."""

"""Interval-aware selective-scan models for longitudinal imaging risk.

The package builds risk predictors for irregularly timed visit sequences:
a selective state-space scan whose discretization step stretches with the
true calendar gap between visits, multi-scale depthwise neighborhood
fusion over the visit grid, and an additive hazard head producing monotone
cumulative risk across horizons.

Submodules load lazily so the command line can pin thread counts in the
environment before numpy is first imported.
"""

from __future__ import annotations

import importlib

from .errors import (
    ConfigurationError,
    DataError,
    DimensionError,
    EmptyReductionError,
    GapscanError,
    MeasurementError,
    NumericError,
    SingularityError,
    TapeError,
    UndefinedMetricError,
)

__version__ = "0.1.0"

_LAZY = {
    "DEFAULT_HORIZONS": "hazard",
    "Outcome": "hazard",
    "ModelConfig": "model",
    "PatientModel": "model",
    "PatientRecord": "model",
    "RiskOutput": "model",
    "GradTape": "tensor",
    "Tensor": "tensor",
    "CohortSpec": "synthdata",
    "generate_cohort": "synthdata",
    "TrainConfig": "train",
}

__all__ = [
    "ConfigurationError",
    "DataError",
    "DimensionError",
    "EmptyReductionError",
    "GapscanError",
    "MeasurementError",
    "NumericError",
    "SingularityError",
    "TapeError",
    "UndefinedMetricError",
    "__version__",
    *sorted(_LAZY),
]


def __getattr__(name: str):
    module = _LAZY.get(name)
    if module is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    return getattr(importlib.import_module(f".{module}", __name__), name)


def __dir__():
    return sorted(set(globals()) | set(_LAZY))

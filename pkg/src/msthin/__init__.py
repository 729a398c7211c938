"""Parametric multistate hazard estimation under reporting delays and incomplete adjudication."""
from __future__ import annotations

from .core import (AdjudicationTrack, Dataset, DataError, EventPath, NumericalError, OptimizerConfig, Outcome,
                   QuadratureConfig, ReportedEvent, StateSpace, SubjectRecord, path_state_at)

__version__ = "0.1.0"

__all__ = [
    "AdjudicationTrack", "Dataset", "DataError", "EventPath", "NumericalError", "OptimizerConfig", "Outcome",
    "QuadratureConfig", "ReportedEvent", "StateSpace", "SubjectRecord", "path_state_at", "__version__",
]

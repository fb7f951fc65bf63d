"""Multicalibration gradient boosting as a discrete-time dynamical system."""

from .dynamics import (
    Adaptive,
    BoostedTrees,
    ConstantSchedule,
    ExactProjection,
    Hybrid,
    PowerLawSchedule,
    Relaxed,
    Trace,
    Unit,
    run,
    step,
)
from .estimator import MulticalibrationBooster
from .exceptions import ContractError, NumericFailure, RunAborted
from .verify import check_trace

__all__ = [
    "Adaptive",
    "BoostedTrees",
    "ConstantSchedule",
    "ContractError",
    "ExactProjection",
    "Hybrid",
    "MulticalibrationBooster",
    "NumericFailure",
    "PowerLawSchedule",
    "Relaxed",
    "RunAborted",
    "Trace",
    "Unit",
    "check_trace",
    "run",
    "step",
]

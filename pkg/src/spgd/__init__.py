"""SVD-preconditioned gradient methods for nonlinear least squares."""

from .errors import InvalidConfigError, InvalidInputError, NumericalFailure, SpgdError
from .optimizers import (
    METHODS,
    HyperParams,
    OptimizerState,
    StaircaseSchedule,
    Trace,
    TraceRow,
    adam_step,
    gd_step,
    lr_at,
    run,
    spgd_adam_step,
    spgd_amsgrad_step,
    spgd_step,
)
from .precond import PrecondSpec, precondition

__all__ = [
    "METHODS",
    "HyperParams",
    "InvalidConfigError",
    "InvalidInputError",
    "NumericalFailure",
    "OptimizerState",
    "PrecondSpec",
    "SpgdError",
    "StaircaseSchedule",
    "Trace",
    "TraceRow",
    "adam_step",
    "gd_step",
    "lr_at",
    "precondition",
    "run",
    "spgd_adam_step",
    "spgd_amsgrad_step",
    "spgd_step",
]

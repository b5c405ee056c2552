"""Conditional-instrument domain generalization with a DeepGMM critic."""

from ._backend import BACKEND
from .errors import (
    CivdgError,
    ColdStratumError,
    ConfigError,
    ContractViolation,
    DataError,
    DimensionError,
    InfeasibleError,
    NumericalAbort,
    StateError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CivdgError", "ColdStratumError", "ConfigError", "ContractViolation", "DataError",
    "DimensionError", "InfeasibleError", "NumericalAbort", "StateError", "ValidationError",
    "__version__",
]

"""Partial-scan STEM completion: paths, pipeline, networks, training, metrics."""

__version__ = "0.1.0"

from .errors import CalibrationError, ContractError, DataError, NumericError

__all__ = [
    "CalibrationError",
    "ContractError",
    "DataError",
    "NumericError",
    "__version__",
]

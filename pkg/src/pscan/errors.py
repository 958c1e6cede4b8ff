"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with arguments that violate its contract."""


class NumericError(ArithmeticError):
    """A non-finite value (NaN/Inf) appeared where finite data is required."""


class CalibrationError(RuntimeError):
    """Coverage calibration failed to converge.

    Carries the best coverage that was achieved so callers can report it.
    """

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class DataError(RuntimeError):
    """Dataset or file-format problem (bad layout, bad magic, empty split)."""

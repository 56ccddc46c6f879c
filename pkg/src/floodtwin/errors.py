"""Exception hierarchy. CLI exit codes are attached to each class."""


class FloodTwinError(Exception):
    exit_code = 2


class DataError(FloodTwinError, ValueError):
    """Malformed, missing or inconsistent input data."""

    exit_code = 2


class GridMismatchError(DataError):
    """Two rasters that must share a grid do not."""


class NumericalError(FloodTwinError, ArithmeticError):
    """Solver instability or a degenerate numerical case."""

    exit_code = 3


class UsageError(FloodTwinError):
    """Bad command-line usage or an inconsistent run configuration."""

    exit_code = 1

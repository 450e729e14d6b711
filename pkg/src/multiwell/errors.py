"""Exception types raised across the package."""


class MultiwellError(Exception):
    """Base class for all package errors."""


class DataError(MultiwellError, ValueError):
    """Malformed or inconsistent input data.

    ``line`` carries the 1-based line number in the offending file when the
    error was raised while parsing.
    """

    def __init__(self, message, *, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class ModelError(MultiwellError, ValueError):
    """Model parameters violate their invariants."""


class PressureControlInfeasible(MultiwellError):
    """The per-step rate system of a pressure-control run is singular."""


class InfeasibleAllocation(MultiwellError):
    """Strict injector allocation cannot be satisfied."""


class FitError(MultiwellError):
    """A fit could not be started (empty data, zero budget, ...)."""

"""Exception hierarchy shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class RecursionOverflowError(OverflowError):
    """The log-scale recursion left the configured magnitude bound."""


class DegenerateInputError(ValueError):
    """Input data cannot support estimation (e.g. a zero-variance column)."""


class ConvergenceError(RuntimeError):
    """A required solve did not produce any usable result."""


class IngestionError(ValueError):
    """A malformed input file; the message names the offending line."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class InsufficientHistoryError(DomainError):
    """A rolling quantity was requested without enough past observations."""

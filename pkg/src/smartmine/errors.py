"""Exception types shared across the package."""


class SmartMineError(Exception):
    """Base class for all package errors."""


class ConfigError(SmartMineError, ValueError):
    """Invalid configuration, shape mismatch or violated precondition."""


class NumericError(SmartMineError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class DegenerateNormError(NumericError):
    """Attempt to normalise a zero vector."""


class DegenerateFitError(SmartMineError):
    """Least-squares fit is not identifiable (e.g. all errors identical)."""


class NoPositiveError(SmartMineError):
    """Neighbour list holds no same-class entry, so no exclusion bound exists."""


class IndexBuildError(SmartMineError):
    """Graph construction stopped at its attempt cap without reaching the target."""


class ParseError(SmartMineError, ValueError):
    """Malformed dataset or checkpoint file."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset

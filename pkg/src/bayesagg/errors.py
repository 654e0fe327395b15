"""Exception types raised across the package."""


class BayesAggError(Exception):
    """Base class for all package errors."""


class NotPSD(BayesAggError, ValueError):
    def __init__(self, message: str, jitter: float | None = None):
        super().__init__(message)
        self.jitter = jitter


class DimensionMismatch(BayesAggError, ValueError):
    pass


class InvalidProbability(BayesAggError, ValueError):
    pass


class InvalidLabel(BayesAggError, ValueError):
    pass


class EmptyTasks(BayesAggError, ValueError):
    pass


class EmptyInput(BayesAggError, ValueError):
    pass


class TraceMismatch(BayesAggError, ValueError):
    pass


class UnknownMethod(BayesAggError, ValueError):
    pass


class NotTrained(BayesAggError, RuntimeError):
    pass


class ParseError(BayesAggError, ValueError):
    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


class LabelOutOfRange(BayesAggError, ValueError):
    pass


class ZeroVariance(BayesAggError, ValueError):
    pass


class ConfigError(BayesAggError, ValueError):
    def __init__(self, field: str, reason: str, path: str | None = None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{field}: {reason}")
        self.field = field
        self.reason = reason
        self.path = path

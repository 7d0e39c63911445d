"""Exception hierarchy shared by the pipeline stages."""


class BadiError(Exception):
    """Base class for every error raised by this package."""


class SchemaError(BadiError):
    """Input table does not provide a mandatory column."""


class RowError(BadiError):
    """A single input row could not be parsed."""

    def __init__(self, row, message):
        self.row = row
        super().__init__(f"row {row}: {message}")


class ImputationError(BadiError):
    """A missing cell has no usable donor."""


class ZeroVarianceError(BadiError):
    """A column (or score vector) has zero variance."""


class SingularMatrixError(BadiError):
    """A correlation or information matrix cannot be inverted."""


class FactorError(BadiError):
    """Principal factor extraction produced no dominant factor."""


class CorrelationError(BadiError):
    """A correlation is undefined for the supplied vectors."""

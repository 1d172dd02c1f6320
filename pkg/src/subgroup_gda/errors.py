"""Exception hierarchy shared across the package."""


class SubgroupError(Exception):
    """Base class for all package errors."""


class ParameterError(SubgroupError, ValueError):
    """An argument lies outside its declared domain."""


class SchemaError(SubgroupError, ValueError):
    """A CSV file does not match the declared column schema."""


class ParseError(SubgroupError, ValueError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class DomainError(SubgroupError, ValueError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class FitError(SubgroupError, RuntimeError):
    """A nuisance model cannot be fit on the given data."""


class NumericalError(SubgroupError, ArithmeticError):
    def __init__(self, message, iteration=None, row=None):
        super().__init__(message)
        self.iteration = iteration
        self.row = row


class CollapseError(SubgroupError, ArithmeticError):
    """The soft subgroup has (numerically) zero mass."""


class DiagnosticError(SubgroupError, ValueError):
    """A diagnostic statistic is undefined for the given selection."""


class StudyError(SubgroupError, RuntimeError):
    """A multi-run study could not produce any usable result."""

"""Exception hierarchy.

Errors fall into three categories that the command line maps onto exit
codes: configuration problems, data problems and numerical failures.
"""


class GpsMatchError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(GpsMatchError, ValueError):
    """Invalid settings (exit code 2 on the command line)."""


class DataError(GpsMatchError, ValueError):
    """Input data violates a precondition (exit code 3)."""


class NumericalError(GpsMatchError, ArithmeticError):
    """A numerical procedure failed (exit code 4)."""


class SchemaError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class SizeError(DataError):
    pass


class InputError(DataError):
    """Non-finite or otherwise unusable argument to an evaluation routine."""


class CaliperError(ConfigError):
    pass


class FitError(NumericalError):
    pass


class DegeneracyError(FitError):
    pass


class StandardizationError(NumericalError):
    pass


class OrthogonalizationError(NumericalError):
    pass


class BlockError(DataError):
    pass


class TuningError(NumericalError):
    pass


class PipelineError(NumericalError):
    """Nothing estimable, e.g. every exposure level is unmatched."""


class ConvergenceError(NumericalError):
    pass


class OutcomeTypeError(DataError, TypeError):
    """Outcomes are not what the estimator requires (e.g. non-integer counts)."""

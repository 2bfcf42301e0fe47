"""Exception hierarchy shared by all modules."""


class ImaError(Exception):
    """Base class for every error raised by ima_bss."""


class InvalidDimensionError(ImaError, ValueError):
    pass


class SingularMatrixError(ImaError, ValueError):
    pass


class DegenerateColumnError(ImaError, ValueError):
    pass


class NotPositiveDefiniteError(ImaError, ValueError):
    pass


class DomainError(ImaError, ValueError):
    """A map was evaluated outside the region where it is defined."""


class OutOfSupportError(DomainError):
    """A density was evaluated outside its support."""


class BoundaryError(ImaError, ValueError):
    """Quantile requested at 0 or 1."""


class SamplingError(ImaError, RuntimeError):
    pass


class DegenerateDataError(ImaError, ValueError):
    pass


class DegenerateMetricError(ImaError, ValueError):
    pass


class NumericalOverflowError(ImaError, FloatingPointError):
    pass


class InversionError(ImaError, RuntimeError):
    """Fixed-point inversion of a residual layer did not converge."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class ContaminatedEstimateError(ImaError, ArithmeticError):
    """A Monte Carlo integrand was singular at one of the sampled points."""

    def __init__(self, message, point):
        super().__init__(f"{message} at point {point!r}")
        self.point = point


class TrainingAborted(ImaError, RuntimeError):
    """Training produced a non-finite objective.

    ``last_good`` holds the parameter vector from the last finite step.
    """

    def __init__(self, message, step, last_good=None, history=None):
        super().__init__(f"{message} at step {step}")
        self.step = step
        self.last_good = last_good
        self.history = history


class ConfigError(ImaError, ValueError):
    """Invalid experiment configuration; ``line`` points into the config file."""

    def __init__(self, message, field=None, line=None):
        loc = f"line {line}: " if line is not None else ""
        super().__init__(f"{loc}{message}")
        self.field = field
        self.line = line

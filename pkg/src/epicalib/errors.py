"""Exception types shared across the toolkit."""


class EpicalibError(Exception):
    """Base class for all toolkit errors."""


class NumericalFailure(EpicalibError):
    """A numeric computation produced NaN/Inf or left its valid range."""


class DomainError(EpicalibError):
    """An input lies outside the mathematical domain of an operation."""


class EmptyMaskError(EpicalibError):
    """No observed entries where at least one is required."""


class GridMismatchError(EpicalibError):
    """Two time-indexed objects do not share the same time grid."""


class FactorizationFailure(EpicalibError):
    """Kernel matrix not positive definite even after jitter escalation."""


class InnerOptimizationFailure(EpicalibError):
    """All restarts of a nested maximization returned non-finite values."""


class OptimizationFailure(EpicalibError):
    """All restarts of an acquisition maximization returned non-finite values."""


class ZeroSubsetError(EpicalibError):
    """The conditioning subset z is all-zero."""


class MissingCountryError(EpicalibError):
    """Requested country not present in the data file."""


class GapInSeriesError(EpicalibError):
    """Date gaps inside a time series that must be contiguous."""

    def __init__(self, missing_dates):
        self.missing_dates = list(missing_dates)
        super().__init__(f"missing dates: {', '.join(str(d) for d in self.missing_dates)}")


class MalformedRowError(EpicalibError):
    """A data file row violates the expected schema."""

    def __init__(self, line_number, reason):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {reason}")


class DivergenceError(EpicalibError):
    """A training loss became NaN."""

    def __init__(self, step, message="loss became NaN"):
        self.step = step
        super().__init__(f"{message} at step {step}")

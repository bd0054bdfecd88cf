"""Exception taxonomy shared across the package.

Grouped by how callers should react: ``UsageError`` means the caller passed
something malformed (fix the call), ``InputFormatError`` means an input file
or artifact is bad (fix the data), ``NumericalError`` means a numerical
procedure failed honestly (retry with different parameters, or give up).
The CLI maps the three groups to distinct exit codes.
"""


class SpecdensError(Exception):
    """Base class for all package-specific errors."""


class UsageError(SpecdensError, ValueError):
    """Malformed arguments or configuration."""


class InputFormatError(SpecdensError):
    """An input file violates its documented format or is inconsistent."""


class NumericalError(SpecdensError):
    """A numerical procedure failed to produce a trustworthy result."""


class AsymmetricInputError(UsageError):
    """A matrix that must be symmetric is not (beyond tolerance)."""


class DimensionMismatchError(InputFormatError):
    """Two artifacts that must agree on dimensions do not."""


class ConvergenceError(NumericalError):
    """An iteration hit its cap without converging."""


class DegenerateSpectrumError(NumericalError):
    """Spectral range collapsed to a point; normalization impossible."""


class RankDeficiencyError(NumericalError):
    """A column vanished during orthonormalization.

    ``column`` holds the offending column index so callers can resample.
    """

    def __init__(self, column: int, message: str | None = None):
        self.column = column
        super().__init__(message or f"column {column} numerically dependent")


class TrainingDivergedError(NumericalError):
    """Training loss became non-finite; the last good state is attached."""

    def __init__(self, message: str, last_checkpoint=None):
        self.last_checkpoint = last_checkpoint
        super().__init__(message)

"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration problems exit 2,
data problems exit 3 and numerical failures exit 4.
"""


class RotionError(Exception):
    """Base class for package errors."""


class ConfigError(RotionError):
    """Bad or inconsistent configuration input."""


class DataError(RotionError):
    """Input data is unusable (malformed files, rejected shots, ...)."""


class DecodeError(DataError):
    """Malformed binary event file.

    Carries the byte offset at which decoding failed so the message can
    point at the corrupt region.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = int(offset)


class InsufficientDataError(DataError):
    """Not enough samples to estimate the requested quantity."""


class ShotRejectionError(DataError):
    """A shot failed pipeline quality checks and was rejected."""


class NumericalError(RotionError):
    """Numerical routine failed to produce a usable result."""


class ConvergenceError(NumericalError):
    """Iterative fit or solver did not converge."""


class CenterSearchError(NumericalError):
    """Rotation-center search hit a non-finite cost or exhausted restarts."""


class IllConditionedFitError(NumericalError):
    """Requested fit has too few independent samples for its model order."""

"""Exception taxonomy shared across the package."""


class SphsError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(SphsError):
    """Bad input: wrong dimensions, unknown kinds, missing or unknown keys."""


class NumericError(SphsError):
    """An evaluator produced NaN/Inf; carries the offending state if known."""

    def __init__(self, message, state=None, path=None, step=None):
        super().__init__(message)
        self.state = state
        self.path = path
        self.step = step


class IntegrationError(SphsError):
    """An implicit stage solve failed to converge."""

    def __init__(self, message, residual=None, path=None, step=None):
        super().__init__(message)
        self.residual = residual
        self.path = path
        self.step = step


class ContractError(SphsError):
    """An operation was handed data missing its recorded prerequisites."""


class StabilityError(SphsError):
    """A drift matrix has an eigenvalue with positive real part."""


class TrainingError(SphsError):
    """Network training diverged."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch

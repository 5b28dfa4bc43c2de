"""Exception types shared across the package."""


class ConfigurationError(Exception):
    """Invalid configuration file, study setup, or physical parameters."""


class NumericalError(Exception):
    """A linear-algebra or optimization step failed beyond recovery."""

    def __init__(self, message, jitter_attempts=None):
        super().__init__(message)
        self.jitter_attempts = list(jitter_attempts) if jitter_attempts else []


class FitError(NumericalError):
    """No hyperparameter restart produced a finite objective."""


class ObjectiveError(Exception):
    """Black-box objective evaluation failed at a specific parameter."""

    def __init__(self, message, theta=None):
        super().__init__(message)
        self.theta = None if theta is None else list(theta)


class FrozenDatasetError(ValueError):
    """Attempted mutation of a dataset that has been frozen."""

"""Exception types raised across the package."""


class FmmiError(Exception):
    """Base class for all package errors."""


class DimensionError(FmmiError, ValueError):
    """Array shapes do not line up."""


class ValidationError(FmmiError, ValueError):
    """An argument is outside its allowed domain."""


class TrainingDivergenceError(FmmiError, RuntimeError):
    """Non-finite values appeared during optimization."""


class IntegrationDivergenceError(FmmiError, RuntimeError):
    """Non-finite state while integrating an ODE."""


class InfeasibleTargetError(FmmiError, ValueError):
    """A benchmark family cannot realise the requested mutual information."""


class DegenerateSampleError(FmmiError, ValueError):
    """Sample geometry breaks a nearest-neighbour estimator."""


class ConfigError(FmmiError, ValueError):
    """Malformed sweep configuration."""

"""Exception hierarchy shared by all modules."""


class APPSError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(APPSError, ValueError):
    """Invalid model, run, or training configuration."""


class InputError(APPSError, ValueError):
    """Invalid argument passed to an operation."""


class EnumerationSizeError(APPSError):
    """The requested oracle enumeration exceeds the configured cap."""


class DivergenceUndefinedError(APPSError, ValueError):
    """The proposal misses support where the target has mass."""


class DegeneratePopulationError(APPSError):
    """Every particle carries zero weight."""


class TrainingError(APPSError):
    """Value-head optimisation diverged."""

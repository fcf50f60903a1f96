"""Exception types shared across the package."""


class StealthflipError(Exception):
    """Base class for all library errors."""


class DimensionError(StealthflipError, ValueError):
    """Tensor or array shapes do not line up."""


class InputError(StealthflipError, ValueError):
    """A value violates an operation's preconditions."""


class ContractError(StealthflipError, ValueError):
    """An argument violates a documented invariant (e.g. non-binary bits)."""


class FormatError(StealthflipError, ValueError):
    """A serialized artifact is malformed or has the wrong version."""


class OptimizationError(StealthflipError, RuntimeError):
    """An iterative solve produced NaN or otherwise went off the rails."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class ConfigError(StealthflipError, ValueError):
    """Experiment configuration failed validation."""

    def __init__(self, message, keys=None):
        super().__init__(message)
        self.keys = list(keys) if keys else []

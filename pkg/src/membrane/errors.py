"""Exception types raised by the membrane toolkit."""


class MembraneError(Exception):
    """Base class for all toolkit errors."""


class ResolutionError(MembraneError, ValueError):
    """Grid too coarse for the requested band limit."""


class DegenerateEmbeddingError(MembraneError):
    """The embedding lost pointwise regularity (det g too small)."""

    def __init__(self, message, node=None, stage=None):
        super().__init__(message)
        self.node = node
        self.stage = stage


class InjectivityRadiusError(MembraneError, ValueError):
    """A tangent vector reached the injectivity radius of the unit sphere."""


class NotTangentError(MembraneError, ValueError):
    pass


class SingularMapError(MembraneError):
    pass


class NoConvergenceError(MembraneError):
    """Iteration cap reached; carries the last iterate for inspection."""

    def __init__(self, message, last=None, residual=None):
        super().__init__(message)
        self.last = last
        self.residual = residual


class ForcingNotDecayingError(MembraneError):
    pass


class InsufficientDataError(MembraneError, ValueError):
    pass


class NonpositiveValueError(MembraneError, ValueError):
    pass


class DivergenceError(MembraneError):
    """Iteration stopped reducing its residual; ``trace`` holds the records so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class CheckpointError(MembraneError):
    pass


class CheckpointVersionError(CheckpointError):
    def __init__(self, found, expected):
        super().__init__(
            f"checkpoint format version {found} does not match supported version {expected}"
        )
        self.found = found
        self.expected = expected


class CheckpointCorruptError(CheckpointError):
    pass


class ConfigError(MembraneError, ValueError):
    pass

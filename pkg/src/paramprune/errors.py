"""Exception types raised by the numerical layers."""


class ParampruneError(Exception):
    """Base class for all package errors."""


class ConfigurationSingular(ParampruneError):
    """The dependent-coordinate Jacobian block is singular or too badly conditioned."""

    def __init__(self, message, cond=None, indices=None):
        super().__init__(message)
        self.cond = cond
        self.indices = indices


class OutsideWorkspace(ParampruneError):
    """Newton iteration on the loop-closure equations did not converge."""

    def __init__(self, message, indices=None):
        super().__init__(message)
        self.indices = indices


class MassSingular(ParampruneError):
    """The (reduced) mass matrix is singular or its condition number exceeds the limit."""

    def __init__(self, message, cond=None, index=None):
        super().__init__(message)
        self.cond = cond
        self.index = index


class InfeasibleExcitation(ParampruneError):
    """No feasible excitation trajectory could be found."""


class InternalConsistencyError(ParampruneError):
    """Two algebraically equal quantities disagree beyond tolerance."""


class UnsupportedTopology(ParampruneError, TypeError):
    """The model topology is not handled by the requested operation."""


class ConfigError(ParampruneError):
    """Invalid pipeline or command configuration."""


class StageError(ParampruneError):
    """A pipeline stage failed; ``stage`` names it and ``cause`` holds the original error."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause

"""Exception types shared across the package."""


class AflkdError(Exception):
    """Base class for package-specific failures."""


class ConfigError(AflkdError):
    """Invalid or inconsistent configuration."""


class ShapeError(AflkdError):
    """Array dimensions do not match what the model expects."""


class BindingError(AflkdError):
    """Parameter vectors bound to different model specs were mixed."""


class NumericError(AflkdError):
    """Non-finite values appeared where finite ones are required."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class TrainingDivergenceError(NumericError):
    """Local training produced a non-finite loss."""

    def __init__(self, message, client_id=None, layer=None):
        super().__init__(message, layer=layer)
        self.client_id = client_id


class SynthesisDivergenceError(NumericError):
    """Pseudo-sample synthesis produced a non-finite loss."""


class SchedulingError(AflkdError):
    """A client was dispatched while it already had a job in flight."""


class UnknownClientError(AflkdError, KeyError):
    """Referenced client id does not exist."""


class SimulationExhausted(AflkdError):
    """The event queue is empty; nothing left to simulate."""

"""Exception hierarchy shared by all mixedcap modules."""


class MixedCapError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(MixedCapError, ValueError):
    """A physical or model parameter violates its invariants."""


class DimensionError(MixedCapError, ValueError):
    """Vector lengths disagree with the lane count."""


class CapabilityError(MixedCapError):
    """Request exceeds what an operation is designed to handle."""


class ConsistencyError(MixedCapError):
    """A closed-form construction failed its own consistency check."""


class IntegrationError(MixedCapError):
    """The vehicle integrator produced a non-finite state."""


class NumericError(MixedCapError):
    """A planner objective evaluated to a non-finite value."""


class ConfigError(MixedCapError):
    """A run configuration could not be parsed or validated."""


class CollisionError(MixedCapError):
    """Two vehicles in the same lane came closer than the safety gap."""

    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}

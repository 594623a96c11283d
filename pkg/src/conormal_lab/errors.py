"""Exception types shared across the library."""


class ConormalLabError(Exception):
    """Base class for library errors."""


class ChartDomainError(ConormalLabError):
    """A point left the valid region of a chart, or never was in it."""


class IntegrationError(ConormalLabError):
    """The ODE solver failed (step-size underflow, NaN state, ...)."""


class EventDetectionError(ConormalLabError):
    """Return-event detection could not produce a trustworthy answer."""


class PerturbationError(ConormalLabError):
    """A perturbation request violates its validity region."""


class SearchError(ConormalLabError):
    """A search exhausted its budget without a verified success."""


class ConfigError(ConormalLabError):
    """A config file is malformed, has unknown keys, or a bad schema tag."""

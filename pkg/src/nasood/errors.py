"""Exception taxonomy shared across the package.

Everything raised on purpose derives from NasOodError so callers can catch
one base type at the CLI boundary.
"""


class NasOodError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(NasOodError):
    """A config value (or combination of values) is unusable."""


class InvalidParameterError(NasOodError):
    """A numeric argument is malformed: wrong shape, non-finite, out of range."""


class ValidationError(NasOodError):
    """Data or a derived structure violates a documented invariant."""


class DatasetError(NasOodError):
    """A dataset could not be generated, loaded, or parsed."""


class ProtocolViolationError(NasOodError):
    """The held-out domain leaked into a split where it must not appear."""


class InternalError(NasOodError):
    """An internal consistency check failed; indicates a bug, not bad input."""


class NonFiniteLossError(NasOodError):
    """A training loss became NaN or infinite."""

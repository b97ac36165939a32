"""Error types raised across the package.

All of these subclass ValueError so callers that only care about "bad
input" can catch one thing, while tests can pin the precise failure.
"""


class MetafewError(ValueError):
    """Base class for errors raised by this package."""


class DimensionError(MetafewError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(MetafewError):
    """An API precondition was violated (wrong tape, bad partition, ...)."""


class CapacityError(MetafewError):
    """A dataset or class cannot supply enough samples for the request."""


class ConfigError(MetafewError):
    """A run configuration is malformed, unknown, or inconsistent."""

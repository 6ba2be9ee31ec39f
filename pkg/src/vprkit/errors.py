"""Exception taxonomy shared across the toolkit.

Exit-code mapping used by the CLI: ValidationError (and its subclass
FormatError) -> 1, ConfigError (and InfeasibleError) -> 2, OSError -> 3.
"""


class VprError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(VprError):
    """A data invariant does not hold (bad values, inconsistent metadata)."""


class FormatError(ValidationError):
    """A serialized file does not conform to its declared format."""


class ConfigError(VprError):
    """Operation parameters are inconsistent or unusable (e.g. dim mismatch)."""


class InfeasibleError(ConfigError):
    """The requested computation cannot be satisfied by the given data."""

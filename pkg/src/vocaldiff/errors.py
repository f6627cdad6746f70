"""Exception types shared across the package."""


class VocalDiffError(ValueError):
    """Base class for all errors raised by this package."""


class DimensionError(VocalDiffError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigurationError(VocalDiffError):
    """A configuration value is invalid or inconsistent."""


class ContractError(VocalDiffError):
    """A call violated an operation's precondition."""


class FormatError(VocalDiffError):
    """A serialized file is malformed, truncated, or has a bad header."""

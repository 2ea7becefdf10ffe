"""Exception taxonomy shared across the package."""


class AquasegError(Exception):
    """Base class for all package-specific failures."""


class ShapeError(AquasegError):
    """Runtime shape/dimension mismatch between values."""


class ConfigError(AquasegError):
    """Invalid configuration or parameter value."""


class ContractError(AquasegError):
    """An API precondition was violated (wrong kind of value, not just shape)."""


class FormatError(AquasegError):
    """Malformed file content."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(FormatError):
    """File ends before the declared payload."""

class VoxPigmentError(Exception):
    """Base class for package errors."""


class ConfigurationError(VoxPigmentError):
    """Bad grid, unknown recipe, hash mismatch and similar setup problems."""


class FormatError(VoxPigmentError):
    """A file could not be parsed or failed validation."""

"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes (see cli.EXIT_CODES).
"""


class ModalcastError(Exception):
    """Base class for all package errors."""


class ConfigError(ModalcastError):
    """Invalid or inconsistent configuration (files, flags, checkpoints)."""


class DataError(ModalcastError):
    """Problem with dataset content or geometry."""


class CapacityError(DataError):
    """A split or view is too short for the requested windowing."""


class ParseError(DataError):
    """Malformed cell or row in an input file."""


class FormatError(ModalcastError):
    """Corrupt or unrecognized binary container / file format."""


class ManifestError(FormatError):
    """A required tensor is missing from a weight container."""


class NumericError(ModalcastError):
    """Non-finite values where finite ones are required."""


class ShapeError(ModalcastError):
    """Dimension mismatch between arrays."""


class UsageError(ModalcastError):
    """An operation was called in a way its contract forbids."""

"""Exception hierarchy shared by every standseg module.

Validation-type errors map to CLI exit code 2, numeric/runtime failures to 3.
"""


class StandsegError(Exception):
    """Base class for all library errors."""

    exit_code = 2


class FormatError(StandsegError):
    """File does not start with the expected magic bytes."""


class CorruptionError(StandsegError):
    """File header and payload disagree (size, shape or checksum)."""


class DimensionError(StandsegError):
    pass


class ShapeError(StandsegError):
    pass


class EncodingError(StandsegError):
    pass


class AlignmentError(StandsegError):
    pass


class GeometryError(StandsegError):
    pass


class InputError(StandsegError):
    pass


class ConfigError(StandsegError):
    pass


class StateError(StandsegError):
    pass


class NumericError(StandsegError):
    """Non-finite values encountered during computation."""

    exit_code = 3

"""Exception hierarchy.

Every error carries the CLI exit code it maps to: 2 for bad input files,
3 for bad configuration, 4 for a failed numerical check.
"""


class MFError(Exception):
    exit_code = 1


class InputError(MFError, ValueError):
    exit_code = 2


class SchemaError(InputError):
    """Document does not match the expected JSON layout."""


class ImageReferenceError(InputError):
    """An annotation or detection points at an undeclared image."""


class RangeError(InputError):
    """Coordinates out of bounds, non-positive resolution, bad confidence."""


class CrossImageError(InputError):
    """Distance requested between points on different images."""


class ImageSetMismatchError(InputError):
    """Two ground truths (or detections) cover different image sets."""


class ConfigError(MFError, ValueError):
    exit_code = 3


class UnknownRaterError(ConfigError):
    pass


class InfeasibleError(ConfigError):
    pass


class SaturationError(ConfigError):
    """Rejection sampling could not place the requested points."""


class DegenerateError(MFError, ArithmeticError):
    """Statistic undefined for the given data (e.g. zero variance)."""

    exit_code = 2


class ShapeMismatchError(MFError, ValueError):
    exit_code = 2


class NumericalCheckError(MFError):
    exit_code = 4

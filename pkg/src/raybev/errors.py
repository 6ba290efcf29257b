"""Exception types raised across the package.

Everything derives from :class:`RayBevError` so callers can catch the whole
family, while each condition keeps a distinct type for targeted handling.
"""


class RayBevError(Exception):
    """Base class for all errors raised by this package."""


class ZeroRange(RayBevError, ValueError):
    """A point sits at (or numerically on top of) the sensor origin."""


class ZeroQuaternion(RayBevError, ValueError):
    """A quaternion with (near-)zero norm cannot be normalized."""


class SingularAugmentation(RayBevError, ValueError):
    """The BEV augmentation matrix is not invertible."""


class FeatureLengthMismatch(RayBevError, ValueError):
    """Per-primitive feature length does not match the grid channel count."""


class ShapeMismatch(RayBevError, ValueError):
    """An array does not have the shape the operation requires."""


class WidthMismatch(RayBevError, ValueError):
    """MLP widths and parameter vector (or input width) disagree."""


class PlacementFailure(RayBevError, RuntimeError):
    """Scene sampling could not place boxes under the overlap constraint."""


class FormatError(RayBevError, ValueError):
    """A binary file does not conform to the expected format."""


class ConfigError(RayBevError, ValueError):
    """A run configuration file is malformed or fails validation."""

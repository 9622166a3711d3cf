"""Exception hierarchy shared by all protossl modules.

The CLI maps these onto its stable exit codes: configuration and geometry
problems exit 2, data/format problems exit 3, numeric failures exit 4.
"""


class ProtoSSLError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ProtoSSLError):
    """Invalid configuration, flag combination, or contract precondition."""


class GeometryError(ConfigError):
    """A crop or resize does not fit inside its source image."""


class ShapeError(ConfigError):
    """Tensor shapes are incompatible for the requested operation."""


class DataError(ProtoSSLError):
    """Dataset contents violate their contract (bad label, missing file)."""


class FormatError(DataError):
    """A binary file does not match its declared format."""


class CorruptionError(FormatError):
    """A binary file is truncated or fails its checksum."""


class NumericError(ProtoSSLError):
    """A computation produced non-finite values."""

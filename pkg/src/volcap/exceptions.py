"""Exception types raised across the package."""


class VolcapError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(VolcapError, ValueError):
    pass


class DegenerateProjection(VolcapError, ValueError):
    """Point lies in the camera plane (|z| < 1e-9)."""


class ParseError(VolcapError, ValueError):
    pass


class InvalidRotation(VolcapError, ValueError):
    pass


class DimensionMismatch(VolcapError, ValueError):
    pass


class EmptyViewList(VolcapError, ValueError):
    pass


class RigMismatch(VolcapError, ValueError):
    pass


class IndexOutOfRange(VolcapError, IndexError):
    pass


class ConfigError(VolcapError, ValueError):
    pass


class DegenerateBatch(VolcapError, ValueError):
    pass


class DataMismatch(VolcapError, ValueError):
    pass


class EmptyDataset(VolcapError, ValueError):
    pass


class ConfigMismatch(VolcapError, ValueError):
    pass


class LengthMismatch(VolcapError, ValueError):
    pass


class IncompatibleCheckpoint(VolcapError, ValueError):
    pass


class FormatError(VolcapError, ValueError):
    """Malformed binary file (bad magic, truncated payload)."""

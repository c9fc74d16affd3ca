"""Exception hierarchy shared across the codec."""


class VoxwaveError(Exception):
    """Base class for all voxwave-specific failures."""


class FormatError(VoxwaveError):
    """Raised when on-disk data does not match its declared layout."""


class ConfigError(VoxwaveError):
    """Raised for unsupported or inconsistent configuration values."""


class GeometryError(VoxwaveError):
    """Raised when array dimensions are incompatible with an operation."""


class ShapeError(VoxwaveError):
    """Raised on tensor shape / channel-count mismatches."""


class NumericError(VoxwaveError):
    """Raised when a computation produces non-finite values."""


class DecodeError(VoxwaveError):
    """Raised when a bitstream fails integrity checks or cannot be decoded."""


class UsageError(VoxwaveError):
    """Raised when an API is called with arguments outside its contract."""


class TrainingDivergedError(VoxwaveError):
    """Raised when the optimizer diverges beyond recovery."""

"""voxwave: volumetric image codec with a trained affine wavelet-like transform."""

from .codec import (CodecConfig, CodecModel, build_model, decode_volume,
                    encode_volume, load_model, metrics, save_model)
from .errors import (ConfigError, DecodeError, FormatError, GeometryError,
                     NumericError, ShapeError, TrainingDivergedError, UsageError,
                     VoxwaveError)
from .volume import (BlockGrid, Volume, load_raw, normalize_minmax, read_volume,
                     tile, untile, write_volume)

__version__ = "0.1.0"

__all__ = [
    "BlockGrid",
    "CodecConfig",
    "CodecModel",
    "ConfigError",
    "DecodeError",
    "FormatError",
    "GeometryError",
    "NumericError",
    "ShapeError",
    "TrainingDivergedError",
    "UsageError",
    "Volume",
    "VoxwaveError",
    "build_model",
    "decode_volume",
    "encode_volume",
    "load_model",
    "load_raw",
    "metrics",
    "normalize_minmax",
    "read_volume",
    "save_model",
    "tile",
    "untile",
    "write_volume",
    "__version__",
]

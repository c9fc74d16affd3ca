"""Volume I/O, min-max normalization, and block tiling.

A volume is a 3-D array of samples indexed (z, y, x) together with bit-depth
and signedness metadata.  The on-disk format is a 32-byte header followed by
little-endian samples in z-major order:

    magic "VXW0" | u32 D, H, W | u8 bit_depth | u8 signed | 14 reserved bytes
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, FormatError, GeometryError

RAW_MAGIC = b"VXW0"
RAW_HEADER_SIZE = 32

_DTYPES = {
    (8, False): np.uint8,
    (8, True): np.int8,
    (16, False): np.uint16,
    (16, True): np.int16,
    (32, False): np.uint32,
    (32, True): np.int32,
}


@dataclass
class Volume:
    """3-D image with sample metadata.

    ``data`` is float64 (z, y, x); original integer samples are stored
    exactly.  ``provenance_scale`` records the (min, max) of the source if
    min-max normalization was applied, and is None otherwise.
    """

    data: np.ndarray
    bit_depth: int = 8
    signed: bool = False
    provenance_scale: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise GeometryError(f"volume must be 3-D, got shape {self.data.shape}")
        if self.bit_depth not in (8, 16, 32):
            raise ConfigError(f"unsupported bit depth {self.bit_depth}")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def max_value(self) -> float:
        return float(2 ** self.bit_depth - 1)


def storage_dtype(bit_depth: int, signed: bool) -> np.dtype:
    try:
        return np.dtype(_DTYPES[(bit_depth, signed)])
    except KeyError:
        raise ConfigError(f"unsupported bit depth {bit_depth}") from None


def load_raw(path, dims: Sequence[int], bit_depth: int, signed: bool = False) -> Volume:
    """Read a headerless little-endian sample array of the given geometry."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise GeometryError(f"bad dims {dims}")
    dtype = storage_dtype(bit_depth, signed).newbyteorder("<")
    raw = Path(path).read_bytes()
    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(
            f"{path}: file is {len(raw)} bytes, expected {expected} for dims {dims}"
        )
    data = np.frombuffer(raw, dtype=dtype).astype(np.float64).reshape(dims)
    return Volume(data, bit_depth=bit_depth, signed=signed)


def read_volume(path) -> Volume:
    """Read a self-describing ``VXW0`` volume file."""
    raw = Path(path).read_bytes()
    if len(raw) < RAW_HEADER_SIZE or raw[:4] != RAW_MAGIC:
        raise FormatError(f"{path}: not a VXW0 volume file")
    d, h, w = struct.unpack_from("<III", raw, 4)
    bit_depth, signed = struct.unpack_from("<BB", raw, 16)
    dtype = storage_dtype(bit_depth, bool(signed)).newbyteorder("<")
    expected = RAW_HEADER_SIZE + d * h * w * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: file is {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype=dtype, offset=RAW_HEADER_SIZE)
    data = data.astype(np.float64).reshape((d, h, w))
    return Volume(data, bit_depth=bit_depth, signed=bool(signed))


def write_volume(path, vol: Volume) -> None:
    """Write a self-describing ``VXW0`` volume file."""
    d, h, w = vol.dims
    header = RAW_MAGIC + struct.pack("<IIIBB", d, h, w, vol.bit_depth, int(vol.signed))
    header += b"\x00" * (RAW_HEADER_SIZE - len(header))
    dtype = storage_dtype(vol.bit_depth, vol.signed).newbyteorder("<")
    payload = vol.data.astype(dtype).tobytes()
    Path(path).write_bytes(header + payload)


def normalize_minmax(vol: Volume) -> Volume:
    """Rescale samples to [0, 65535] and requantize to 16 bits.

    The source (min, max) is kept in ``provenance_scale`` so the scaling can
    be undone.  A constant volume maps to all zeros.
    """
    lo = float(vol.data.min())
    hi = float(vol.data.max())
    if hi > lo:
        scaled = (vol.data - lo) / (hi - lo) * 65535.0
    else:
        scaled = np.zeros_like(vol.data)
    out = np.floor(scaled + 0.5)  # values are non-negative here
    return Volume(out, bit_depth=16, signed=False, provenance_scale=(lo, hi))


def denormalize(vol: Volume, bit_depth: int, signed: bool) -> Volume:
    """Invert :func:`normalize_minmax` using the recorded provenance scale."""
    if vol.provenance_scale is None:
        raise ConfigError("volume carries no provenance scale")
    lo, hi = vol.provenance_scale
    data = vol.data / 65535.0 * (hi - lo) + lo
    return Volume(data, bit_depth=bit_depth, signed=signed)


@dataclass
class BlockGrid:
    """Partition of a volume into equally sized replicate-padded blocks."""

    dims: Tuple[int, int, int]
    block_dims: Tuple[int, int, int]
    counts: Tuple[int, int, int] = field(init=False)
    padding: Tuple[int, int, int] = field(init=False)

    def __post_init__(self):
        counts, pads = [], []
        for dim, bd in zip(self.dims, self.block_dims):
            if bd <= 0:
                raise GeometryError(f"bad block dims {self.block_dims}")
            n = -(-dim // bd)
            counts.append(n)
            pads.append(n * bd - dim)
        self.counts = tuple(counts)
        self.padding = tuple(pads)

    @property
    def n_blocks(self) -> int:
        return self.counts[0] * self.counts[1] * self.counts[2]

    @classmethod
    def for_volume(cls, dims, block=(64, 64, 64), levels: int = 3) -> "BlockGrid":
        """Pick per-axis block dims: the default block, or for short axes the
        dimension rounded up to a multiple of 2**levels (avoids gross padding)."""
        m = 1 << levels
        bdims = []
        for dim, bd in zip(dims, block):
            if bd % m != 0:
                raise GeometryError(f"block dim {bd} not divisible by 2^{levels}")
            rounded = -(-dim // m) * m
            bdims.append(rounded if rounded <= bd else bd)
        return cls(tuple(dims), tuple(bdims))


def tile(vol_data: np.ndarray, grid: BlockGrid) -> list[np.ndarray]:
    """Split a volume into replicate-padded blocks in z-major block order."""
    if tuple(vol_data.shape) != grid.dims:
        raise GeometryError(f"volume {vol_data.shape} does not match grid {grid.dims}")
    padded = np.pad(vol_data, [(0, p) for p in grid.padding], mode="edge")
    bz, by, bx = grid.block_dims
    blocks = []
    for iz in range(grid.counts[0]):
        for iy in range(grid.counts[1]):
            for ix in range(grid.counts[2]):
                blocks.append(
                    padded[
                        iz * bz : (iz + 1) * bz,
                        iy * by : (iy + 1) * by,
                        ix * bx : (ix + 1) * bx,
                    ].copy()
                )
    return blocks


def untile(blocks: Sequence[np.ndarray], grid: BlockGrid) -> np.ndarray:
    """Reassemble blocks produced by :func:`tile` and crop the padding."""
    if len(blocks) != grid.n_blocks:
        raise GeometryError(f"expected {grid.n_blocks} blocks, got {len(blocks)}")
    bz, by, bx = grid.block_dims
    full = np.empty(
        (grid.counts[0] * bz, grid.counts[1] * by, grid.counts[2] * bx),
        dtype=np.float64,
    )
    i = 0
    for iz in range(grid.counts[0]):
        for iy in range(grid.counts[1]):
            for ix in range(grid.counts[2]):
                full[
                    iz * bz : (iz + 1) * bz,
                    iy * by : (iy + 1) * by,
                    ix * bx : (ix + 1) * bx,
                ] = blocks[i]
                i += 1
    d, h, w = grid.dims
    return full[:d, :h, :w].copy()

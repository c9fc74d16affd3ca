"""Self-describing bitstream container.

Layout: header, then per block (z-major) and per subband (serialization
order) one record {band id u8, flags u8, q_lo i32, q_hi i32, payload length
u32, payload}, then a trailing CRC32 over everything before it.  All
integers little-endian.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from .errors import DecodeError

STREAM_MAGIC = b"VXWS"
STREAM_VERSION = 1

SHARING_CODES = ("share_all", "share_xy", "share_xz", "share_yz", "share_none")
GRANULARITY_CODES = ("fine", "coarse", "none")
ENTROPY_CODES = ("factorized", "context")
TRANSFORM_CODES = ("learned", "cdf53", "cdf97")
AXIS_ORDER_ZYX = 0

_HEADER_FMT = "<4sBBBBBBBBBBBIIIHHHdIBdd"
RECORD_FLAG_ESCAPES = 1


@dataclass
class BitstreamHeader:
    levels: int = 3
    steps: int = 2
    width: int = 16
    sharing: str = "share_xy"
    granularity: str = "fine"
    transform_kind: str = "learned"
    entropy: str = "factorized"
    lossless: bool = False
    bit_depth: int = 8
    signed: bool = False
    dims: Tuple[int, int, int] = (0, 0, 0)
    block_dims: Tuple[int, int, int] = (64, 64, 64)
    qs: float = 1.0
    model_hash: int = 0
    axis_order: int = AXIS_ORDER_ZYX
    norm_scale: Optional[Tuple[float, float]] = None

    def pack(self) -> bytes:
        has_norm = self.norm_scale is not None
        lo, hi = self.norm_scale if has_norm else (0.0, 0.0)
        return struct.pack(
            _HEADER_FMT,
            STREAM_MAGIC,
            STREAM_VERSION,
            self.levels,
            self.steps,
            self.width,
            SHARING_CODES.index(self.sharing),
            GRANULARITY_CODES.index(self.granularity),
            TRANSFORM_CODES.index(self.transform_kind),
            ENTROPY_CODES.index(self.entropy),
            int(self.lossless),
            self.bit_depth,
            int(self.signed),
            *self.dims,
            *self.block_dims,
            self.qs,
            self.model_hash,
            int(has_norm),
            lo,
            hi,
        )

    @classmethod
    def unpack(cls, data: bytes) -> Tuple["BitstreamHeader", int]:
        size = struct.calcsize(_HEADER_FMT)
        if len(data) < size:
            raise DecodeError("stream shorter than its header")
        fields = struct.unpack_from(_HEADER_FMT, data)
        (magic, version, levels, steps, width, sharing, gran, tkind, ent,
         lossless, bit_depth, signed, d0, d1, d2, b0, b1, b2, qs, mhash,
         has_norm, nlo, nhi) = fields
        if magic != STREAM_MAGIC:
            raise DecodeError("bad stream magic")
        if version != STREAM_VERSION:
            raise DecodeError(f"unsupported stream version {version}")
        hdr = cls(
            levels=levels,
            steps=steps,
            width=width,
            sharing=SHARING_CODES[sharing],
            granularity=GRANULARITY_CODES[gran],
            transform_kind=TRANSFORM_CODES[tkind],
            entropy=ENTROPY_CODES[ent],
            lossless=bool(lossless),
            bit_depth=bit_depth,
            signed=bool(signed),
            dims=(d0, d1, d2),
            block_dims=(b0, b1, b2),
            qs=qs,
            model_hash=mhash,
            norm_scale=(nlo, nhi) if has_norm else None,
        )
        return hdr, size


@dataclass
class BandRecord:
    band_id: int
    q_lo: int
    q_hi: int
    escapes: bool
    payload: bytes

    def pack(self) -> bytes:
        flags = RECORD_FLAG_ESCAPES if self.escapes else 0
        return struct.pack("<BBiiI", self.band_id, flags, self.q_lo,
                           self.q_hi, len(self.payload)) + self.payload


@dataclass
class Bitstream:
    header: BitstreamHeader
    records: List[BandRecord] = field(default_factory=list)

    def pack(self) -> bytes:
        body = self.header.pack() + b"".join(r.pack() for r in self.records)
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def unpack(cls, data: bytes) -> "Bitstream":
        if len(data) < 4:
            raise DecodeError("stream truncated")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise DecodeError("stream CRC mismatch")
        header, pos = BitstreamHeader.unpack(body)
        records = []
        rec_fmt = "<BBiiI"
        rec_size = struct.calcsize(rec_fmt)
        while pos < len(body):
            if pos + rec_size > len(body):
                raise DecodeError(f"truncated band record at byte {pos}")
            band_id, flags, q_lo, q_hi, plen = struct.unpack_from(rec_fmt, body, pos)
            pos += rec_size
            if pos + plen > len(body):
                raise DecodeError(f"truncated band payload at byte {pos}")
            records.append(
                BandRecord(band_id, q_lo, q_hi, bool(flags & RECORD_FLAG_ESCAPES),
                           body[pos : pos + plen])
            )
            pos += plen
        return cls(header, records)

"""End-to-end encode/decode pipelines and the bundled model container.

Lossy path: forward transform -> uniform quantization -> entropy coding;
decoding inverts and runs the post-processing enhancer.  Lossless path:
integer transform with unit gains, no quantization, no post-processing;
decoding is bit-exact.

Numeric conventions: lifting arithmetic always runs in float64.  On the
lossless path the networks evaluate in float32 (exactness comes from the
shared rounding, so network precision is irrelevant and the fast conv
kernels apply); on the float path the networks are evaluated in float64 so
forward and inverse agree to ~1e-9.
"""

from __future__ import annotations

import concurrent.futures
import zlib
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from torch import nn

from .bitstream import BandRecord, Bitstream, BitstreamHeader
from .entropy import (ContextEntropyModel, FactorizedEntropyModel,
                      PatchContextCoder, choose_support)
from .errors import ConfigError, DecodeError
from .nn import (Conv3d, ResidualBlock, deserialize_weights, load_module_weights,
                 module_weights, serialize_weights, to_double)
from .quant import QuantConfig, dequantize, quantize
from .rangecoder import (BitReader, BitWriter, DiscretePmf, RangeDecoder,
                         RangeEncoder, decode_band, encode_band)
from .transform import (SubbandSet, TransformModel, band_dims, band_order,
                        fixed_chains, forward_3d, inverse_3d, inverse_one_level)
from .volume import BlockGrid, Volume, normalize_minmax, tile, untile

BAND_LABELS = ("HLL", "LHL", "HHL", "LLH", "HLH", "LHH", "HHH")


@dataclass
class CodecConfig:
    levels: int = 3
    steps: int = 2
    width: int = 16
    sharing: str = "share_xy"
    granularity: str = "fine"
    transform_kind: str = "learned"
    entropy: str = "factorized"
    lossless: bool = False
    qs: float = 1.0
    block: Tuple[int, int, int] = (64, 64, 64)
    support_width: int = 4096


class PostProcessNet(nn.Module):
    """Quantization-noise enhancer: head conv, six residual blocks, zero-
    initialized tail conv, global input skip."""

    def __init__(self, width: int = 16, n_blocks: int = 6):
        super().__init__()
        self.head = Conv3d(1, width)
        self.blocks = nn.Sequential(*(ResidualBlock(width) for _ in range(n_blocks)))
        self.tail = Conv3d(width, 1, zero_init=True)
        self.tail._zero_init = True

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.blocks(self.head(x.unsqueeze(0)))
        return x + self.tail(y).squeeze(0)


class CodecModel(nn.Module):
    """Transform, entropy, and post-processing weights plus configuration."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config
        if config.transform_kind == "learned":
            self.transform: Optional[TransformModel] = TransformModel(
                config.sharing, config.granularity, config.width, config.steps
            )
        elif config.transform_kind in ("cdf53", "cdf97"):
            self.transform = None
        else:
            raise ConfigError(f"unknown transform kind {config.transform_kind!r}")
        self.entropy = FactorizedEntropyModel(config.levels)
        self.context = ContextEntropyModel(config.width)
        self.post = PostProcessNet(config.width)

    def chains(self, double: bool = False):
        if self.transform is None:
            return fixed_chains(self.config.transform_kind)
        model = to_double(self.transform) if double else self.transform
        return model.chains()

    def named_weights(self) -> Dict[str, np.ndarray]:
        named = module_weights(self)
        named.update(_config_tensors(self.config))
        return named

    def hash(self) -> int:
        return zlib.crc32(serialize_weights(self.named_weights())[:-4])


def _config_tensors(cfg: CodecConfig) -> Dict[str, np.ndarray]:
    from .bitstream import (ENTROPY_CODES, GRANULARITY_CODES, SHARING_CODES,
                            TRANSFORM_CODES)

    scalars = {
        "config/levels": cfg.levels,
        "config/steps": cfg.steps,
        "config/width": cfg.width,
        "config/sharing": SHARING_CODES.index(cfg.sharing),
        "config/granularity": GRANULARITY_CODES.index(cfg.granularity),
        "config/transform": TRANSFORM_CODES.index(cfg.transform_kind),
        "config/entropy": ENTROPY_CODES.index(cfg.entropy),
        "config/lossless": int(cfg.lossless),
        "config/block": None,
        "config/support_width": cfg.support_width,
    }
    out = {k: np.array([v], dtype="<f4") for k, v in scalars.items() if v is not None}
    out["config/block"] = np.array(cfg.block, dtype="<f4")
    # float64 qs preserved exactly as a pair of float32 bit patterns
    out["config/qs"] = np.array([cfg.qs], dtype="<f8").view("<f4")
    return out


def _config_from_tensors(named: Dict[str, np.ndarray]) -> CodecConfig:
    from .bitstream import (ENTROPY_CODES, GRANULARITY_CODES, SHARING_CODES,
                            TRANSFORM_CODES)

    def scalar(name):
        return int(round(float(named[name][0])))

    return CodecConfig(
        levels=scalar("config/levels"),
        steps=scalar("config/steps"),
        width=scalar("config/width"),
        sharing=SHARING_CODES[scalar("config/sharing")],
        granularity=GRANULARITY_CODES[scalar("config/granularity")],
        transform_kind=TRANSFORM_CODES[scalar("config/transform")],
        entropy=ENTROPY_CODES[scalar("config/entropy")],
        lossless=bool(scalar("config/lossless")),
        qs=float(named["config/qs"].view("<f8")[0]),
        block=tuple(int(round(float(v))) for v in named["config/block"]),
        support_width=scalar("config/support_width"),
    )


def build_model(config: CodecConfig, seed: int = 0) -> CodecModel:
    torch.manual_seed(seed)
    return CodecModel(config)


def save_model(model: CodecModel, path) -> None:
    from pathlib import Path

    Path(path).write_bytes(serialize_weights(model.named_weights()))


def load_model(path) -> CodecModel:
    from pathlib import Path

    named = deserialize_weights(Path(path).read_bytes())
    model = build_model(_config_from_tensors(named), seed=0)
    load_module_weights(model, {k: v for k, v in named.items()
                                if not k.startswith("config/")})
    return model


# -- block coding ------------------------------------------------------------


def _band_symbols(bands: SubbandSet) -> Dict[Tuple[int, str], np.ndarray]:
    return {k: t.detach().numpy().astype(np.int64) for k, t in bands.bands.items()}


def _pack_payload(coder: bytes, escapes: bytes, has_escapes: bool) -> bytes:
    if not has_escapes:
        return coder
    import struct

    return struct.pack("<I", len(coder)) + coder + escapes


def _split_payload(payload: bytes, has_escapes: bool):
    if not has_escapes:
        return payload, None
    import struct

    if len(payload) < 4:
        raise DecodeError("band payload shorter than its coder-length prefix")
    (clen,) = struct.unpack_from("<I", payload)
    if 4 + clen > len(payload):
        raise DecodeError("band payload coder section truncated")
    return payload[4 : 4 + clen], BitReader(payload[4 + clen :])


def _encode_block_factorized(q: Dict[Tuple[int, str], np.ndarray], model: CodecModel,
                             support_width: int) -> List[BandRecord]:
    records = []
    for band_id, key in enumerate(band_order(model.config.levels)):
        symbols = q[key].ravel()
        lo, hi, esc = choose_support(symbols, support_width)
        pmf = model.entropy.pmf(key[0], key[1], lo, hi)
        enc = RangeEncoder()
        bits = BitWriter() if esc else None
        encode_band(enc, symbols, pmf, esc, bits)
        payload = _pack_payload(enc.finish(), bits.to_bytes() if esc else b"", esc)
        records.append(BandRecord(band_id, lo, hi, esc, payload))
    return records


def _decode_block_factorized(records: List[BandRecord], model: CodecModel,
                             block_dims) -> Dict[Tuple[int, str], np.ndarray]:
    out = {}
    order = band_order(model.config.levels)
    for band_id, (rec, key) in enumerate(zip(records, order)):
        if rec.band_id != band_id:
            raise DecodeError(f"band record {rec.band_id} out of order")
        dims = band_dims(block_dims, key[0])
        count = dims[0] * dims[1] * dims[2]
        pmf = model.entropy.pmf(key[0], key[1], rec.q_lo, rec.q_hi)
        coder_bytes, bits = _split_payload(rec.payload, rec.escapes)
        dec = RangeDecoder(coder_bytes)
        out[key] = decode_band(dec, count, pmf, rec.escapes, bits).reshape(dims)
    return out


class _ContextBlockCodec:
    """Sequential context-model coding of one block's bands.

    Encoder and decoder walk the same state machine: per band, build the
    context planes from already-coded symbols (plus a reconstructed low-pass
    when crossing levels), then code voxels in raster order against
    per-voxel PMFs.
    """

    def __init__(self, model: CodecModel, block_dims, lossless: bool, qs: float):
        self.model = model
        self.block_dims = block_dims
        self.lossless = lossless
        self.qs = 1.0 if lossless else qs
        self.levels = model.config.levels
        self.chains64 = model.chains(double=True)
        self.decoded: Dict[Tuple[int, str], np.ndarray] = {}
        self._lowpass: Dict[int, torch.Tensor] = {}  # coefficient-domain LLL per level

    def _record_band(self, level: int, label: str, symbols: np.ndarray) -> None:
        self.decoded[(level, label)] = symbols
        if label == "LLL":
            t = torch.from_numpy(symbols.astype(np.float64))
            self._lowpass[level] = t if self.lossless else t * self.qs

    def _lowpass_at(self, level: int) -> torch.Tensor:
        """Coefficient-domain low-pass at ``level``, reconstructed on demand
        by inverting the level+1 octet (deterministic float64 / integer)."""
        if level not in self._lowpass:
            octet = {"LLL": self._lowpass_at(level + 1)}
            for lab in BAND_LABELS:
                t = torch.from_numpy(self.decoded[(level + 1, lab)].astype(np.float64))
                octet[lab] = t if self.lossless else t * self.qs
            self._lowpass[level] = inverse_one_level(octet, self.chains64,
                                                     integer=self.lossless)
        return self._lowpass[level]

    def _context_planes(self, level: int, label: str) -> torch.Tensor:
        dims = band_dims(self.block_dims, level)
        planes = torch.zeros((8,) + dims, dtype=torch.float64)
        if label != "LLL":
            planes[0] = self._lowpass_at(level) / self.qs
            for j, lab in enumerate(BAND_LABELS):
                if lab == label:
                    break
                planes[1 + j] = torch.from_numpy(
                    self.decoded[(level, lab)].astype(np.float64)
                )
        # the deepest LLL is coded first with an all-zero context (bias field)
        return planes

    def encode(self, q: Dict[Tuple[int, str], np.ndarray],
               support_width: int) -> List[BandRecord]:
        records = []
        for band_id, (level, label) in enumerate(band_order(self.levels)):
            symbols = q[(level, label)]
            lo, hi, esc = choose_support(symbols.ravel(), support_width)
            coder = PatchContextCoder(self.model.context,
                                      self._context_planes(level, label))
            enc = RangeEncoder()
            bits = BitWriter() if esc else None
            d, h, w = symbols.shape
            for z in range(d):
                for y in range(h):
                    for x in range(w):
                        s = int(symbols[z, y, x])
                        pmf = coder.pmf_at(z, y, x, lo, hi)
                        _encode_escaped(enc, s, pmf, esc, bits)
                        coder.push_symbol(z, y, x, float(s))
            payload = _pack_payload(enc.finish(), bits.to_bytes() if esc else b"", esc)
            records.append(BandRecord(band_id, lo, hi, esc, payload))
            self._record_band(level, label, symbols)
        return records

    def decode(self, records: List[BandRecord]) -> Dict[Tuple[int, str], np.ndarray]:
        for rec, (level, label) in zip(records, band_order(self.levels)):
            dims = band_dims(self.block_dims, level)
            coder = PatchContextCoder(self.model.context,
                                      self._context_planes(level, label))
            coder_bytes, bits = _split_payload(rec.payload, rec.escapes)
            dec = RangeDecoder(coder_bytes)
            out = np.empty(dims, dtype=np.int64)
            for z in range(dims[0]):
                for y in range(dims[1]):
                    for x in range(dims[2]):
                        pmf = coder.pmf_at(z, y, x, rec.q_lo, rec.q_hi)
                        s = _decode_escaped(dec, pmf, rec.escapes, bits)
                        out[z, y, x] = s
                        coder.push_symbol(z, y, x, float(s))
            self._record_band(level, label, out)
        return self.decoded


def _encode_escaped(enc: RangeEncoder, s: int, pmf: DiscretePmf, escapes: bool,
                    bits: "BitWriter | None") -> None:
    n = len(pmf.freqs)
    if n == 1 and escapes:
        from .rangecoder import _zigzag

        bits.write_ue(int(_zigzag(np.array([s - pmf.q_lo]))[0]))
        return
    j = min(max(s - pmf.q_lo, 0), n - 1)
    enc.encode_symbol(j, pmf.cdf)
    if escapes:
        if j == 0:
            bits.write_ue(pmf.q_lo - s)
        elif j == n - 1:
            bits.write_ue(s - pmf.q_hi)


def _decode_escaped(dec: RangeDecoder, pmf: DiscretePmf, escapes: bool,
                    bits: "BitReader | None") -> int:
    n = len(pmf.freqs)
    if n == 1 and escapes:
        from .rangecoder import _unzigzag

        return pmf.q_lo + _unzigzag(bits.read_ue())
    j = dec.decode_symbol(pmf.cdf)
    s = pmf.q_lo + j
    if escapes:
        if j == 0:
            s = pmf.q_lo - bits.read_ue()
        elif j == n - 1:
            s = pmf.q_hi + bits.read_ue()
    return s


def _encode_block(block: np.ndarray, model: CodecModel, lossless: bool) -> List[BandRecord]:
    cfg = model.config
    x = torch.from_numpy(block)
    with torch.no_grad():
        if lossless:
            bands = forward_3d(x, cfg.levels, model.chains(double=False), integer=True)
            q = _band_symbols(bands)
        else:
            bands = forward_3d(x, cfg.levels, model.chains(double=True), integer=False)
            q = _band_symbols(quantize(bands, QuantConfig(cfg.qs)))
    if cfg.entropy == "factorized":
        return _encode_block_factorized(q, model, cfg.support_width)
    codec = _ContextBlockCodec(model, tuple(block.shape), lossless, cfg.qs)
    return codec.encode(q, cfg.support_width)


def _decode_block(records: List[BandRecord], model: CodecModel, header: BitstreamHeader) -> np.ndarray:
    cfg = model.config
    lossless = header.lossless
    if cfg.entropy == "factorized":
        q = _decode_block_factorized(records, model, header.block_dims)
    else:
        codec = _ContextBlockCodec(model, header.block_dims, lossless, header.qs)
        q = codec.decode(records)
    bands = SubbandSet(
        cfg.levels, header.block_dims,
        {k: torch.from_numpy(v.astype(np.float64)) for k, v in q.items()},
    )
    with torch.no_grad():
        if lossless:
            x = inverse_3d(bands, model.chains(double=False), integer=True)
        else:
            y = dequantize(bands, QuantConfig(header.qs))
            x = inverse_3d(y, model.chains(double=True), integer=False)
            x = model.post(x.float()).double()
    return x.numpy()


def _sample_range(bit_depth: int, signed: bool) -> Tuple[float, float]:
    if signed:
        return -float(2 ** (bit_depth - 1)), float(2 ** (bit_depth - 1) - 1)
    return 0.0, float(2 ** bit_depth - 1)


def encode_volume(vol: Volume, model: CodecModel, mode: Optional[str] = None,
                  force_normalize: bool = False, jobs: int = 1) -> bytes:
    """Compress a volume to a self-contained bitstream."""
    cfg = model.config
    if mode is not None and mode not in ("lossy", "lossless"):
        raise ConfigError(f"unknown mode {mode!r}")
    lossless = cfg.lossless if mode is None else (mode == "lossless")
    work = vol
    if vol.bit_depth == 32 or force_normalize:
        work = normalize_minmax(vol)
    grid = BlockGrid.for_volume(work.dims, cfg.block, cfg.levels)
    header = BitstreamHeader(
        levels=cfg.levels,
        steps=cfg.steps,
        width=cfg.width,
        sharing=cfg.sharing,
        granularity=cfg.granularity,
        transform_kind=cfg.transform_kind,
        entropy=cfg.entropy,
        lossless=lossless,
        bit_depth=work.bit_depth,
        signed=work.signed,
        dims=work.dims,
        block_dims=grid.block_dims,
        qs=cfg.qs,
        model_hash=model.hash(),
        norm_scale=work.provenance_scale,
    )
    blocks = tile(work.data, grid)
    if jobs > 1 and len(blocks) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            per_block = list(pool.map(lambda b: _encode_block(b, model, lossless), blocks))
    else:
        per_block = [_encode_block(b, model, lossless) for b in blocks]
    records = [rec for recs in per_block for rec in recs]
    return Bitstream(header, records).pack()


def decode_volume(data: bytes, model: CodecModel, jobs: int = 1) -> Volume:
    """Decode a bitstream produced by :func:`encode_volume` with this model."""
    bs = Bitstream.unpack(data)
    header = bs.header
    if header.model_hash != model.hash():
        raise DecodeError("stream was produced with a different model "
                          f"(hash {header.model_hash:#010x} != {model.hash():#010x})")
    grid = BlockGrid(header.dims, header.block_dims)
    per_block = 7 * header.levels + 1
    if len(bs.records) != per_block * grid.n_blocks:
        raise DecodeError(
            f"expected {per_block * grid.n_blocks} band records, got {len(bs.records)}"
        )
    chunks = [bs.records[i * per_block : (i + 1) * per_block]
              for i in range(grid.n_blocks)]
    if jobs > 1 and len(chunks) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            blocks = list(pool.map(lambda recs: _decode_block(recs, model, header), chunks))
    else:
        blocks = [_decode_block(recs, model, header) for recs in chunks]
    data3 = untile(blocks, grid)
    if not header.lossless:
        lo, hi = _sample_range(header.bit_depth, header.signed)
        data3 = np.clip(np.sign(data3) * np.floor(np.abs(data3) + 0.5), lo, hi)
    return Volume(data3, bit_depth=header.bit_depth, signed=header.signed,
                  provenance_scale=header.norm_scale)


def metrics(x: Volume, xhat: Volume, stream_bytes: int) -> Tuple[float, float]:
    """(PSNR in dB with MAX = 2^bit_depth - 1, bits per sample)."""
    if x.dims != xhat.dims:
        raise ConfigError(f"dims mismatch {x.dims} vs {xhat.dims}")
    mse = float(np.mean((x.data - xhat.data) ** 2))
    peak = x.max_value
    psnr = float("inf") if mse == 0 else 10.0 * np.log10(peak * peak / mse)
    bpp = 8.0 * stream_bytes / x.data.size
    return psnr, bpp

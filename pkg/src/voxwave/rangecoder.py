"""Bit-exact range coder over 16-bit quantized PMFs.

The coder keeps a 64-bit state and renormalizes 32 bits at a time; symbol
probabilities are integer frequencies summing to exactly 2**16, each >= 1.
Carries propagate through a cache/pending mechanism; the first (always
redundant) output word is suppressed and trailing zero bytes are stripped,
so termination costs at most 64 bits beyond the information content.
Decoding treats missing trailing bytes as zeros.

Symbols outside a PMF's support are coded as the nearest boundary symbol;
an Exp-Golomb refinement (present for every boundary occurrence when a
band signals escapes) is written to a raw bit section that follows the
range-coded bytes, where it can be packed and parsed in bulk.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DecodeError, UsageError

PRECISION = 16
TOTAL = 1 << PRECISION
_MASK64 = (1 << 64) - 1
_TOP = 1 << 32
_HALF_CDF = np.array([0, TOTAL // 2, TOTAL], dtype=np.uint32)


def quantize_pmf(probs: np.ndarray) -> np.ndarray:
    """Integer frequencies summing to exactly TOTAL, each >= 1.

    Deterministic: remainders go to the largest fractional parts (ties by
    lower index); mass needed to lift zero entries is taken from the largest
    entries.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or len(p) == 0:
        raise UsageError("pmf must be a non-empty 1-D array")
    if len(p) > TOTAL // 8:
        raise UsageError(f"pmf support too wide ({len(p)} symbols)")
    p = np.maximum(p, 0.0)
    total = p.sum()
    p = p / total if total > 0 else np.full(len(p), 1.0 / len(p))
    scaled = p * TOTAL
    freqs = np.floor(scaled).astype(np.int64)
    remainder = TOTAL - int(freqs.sum())
    if remainder > 0:
        frac = scaled - np.floor(scaled)
        order = np.lexsort((np.arange(len(p)), -frac))
        freqs[order[:remainder]] += 1
    zeros = np.flatnonzero(freqs == 0)
    if len(zeros) > 0:
        freqs[zeros] = 1
        need = len(zeros)
        order = np.lexsort((np.arange(len(p)), -freqs))
        for i in order:
            if need == 0:
                break
            take = min(need, int(freqs[i]) - 1)
            freqs[i] -= take
            need -= take
        if need > 0:
            raise UsageError("pmf support too wide to give every symbol mass")
    return freqs.astype(np.uint32)


@dataclass
class DiscretePmf:
    """Coder-ready PMF over the integer interval [q_lo, q_hi]."""

    q_lo: int
    freqs: np.ndarray  # uint32, sum == TOTAL, all >= 1

    def __post_init__(self):
        self.freqs = np.asarray(self.freqs, dtype=np.uint32)
        self.cdf = np.zeros(len(self.freqs) + 1, dtype=np.uint32)
        np.cumsum(self.freqs, out=self.cdf[1:])
        if int(self.cdf[-1]) != TOTAL:
            raise UsageError("pmf frequencies must sum to 2^16")
        if int(self.freqs.min()) < 1:
            raise UsageError("pmf has a zero-frequency symbol")
        self._lut = None

    @property
    def q_hi(self) -> int:
        return self.q_lo + len(self.freqs) - 1

    @property
    def probs(self) -> np.ndarray:
        return self.freqs.astype(np.float64) / TOTAL

    def symbol_lut(self) -> np.ndarray:
        """value-in-[0,TOTAL) -> symbol index table for O(1) decoding."""
        if self._lut is None:
            self._lut = np.repeat(
                np.arange(len(self.freqs), dtype=np.int64), self.freqs
            )
        return self._lut

    def bits_for(self, symbols: np.ndarray) -> float:
        """Ideal code length of in-support symbols under this PMF."""
        idx = np.clip(np.asarray(symbols, dtype=np.int64) - self.q_lo,
                      0, len(self.freqs) - 1)
        return float(-np.log2(self.probs[idx]).sum())


class RangeEncoder:
    def __init__(self):
        self._low = 0
        self._range = _MASK64
        self._cache = 0
        self._pending = 0
        self._writes = 0
        self._out = bytearray()
        self._done = False

    def _emit(self, word: int) -> None:
        if self._writes > 0:  # the first word is always redundant
            self._out += word.to_bytes(4, "big")
        self._writes += 1

    def _shift_low(self) -> None:
        if self._low < 0xFFFFFFFF00000000 or self._low > _MASK64:
            carry = self._low >> 64
            self._emit((self._cache + carry) & 0xFFFFFFFF)
            while self._pending:
                self._emit((0xFFFFFFFF + carry) & 0xFFFFFFFF)
                self._pending -= 1
            self._cache = (self._low >> 32) & 0xFFFFFFFF
        else:
            self._pending += 1
        self._low = (self._low << 32) & _MASK64

    def encode(self, cum: int, freq: int) -> None:
        r = self._range >> PRECISION
        self._low += cum * r
        self._range = freq * r
        while self._range < _TOP:
            self._shift_low()
            self._range = (self._range << 32) & _MASK64

    def encode_symbol(self, symbol_index: int, cdf: np.ndarray) -> None:
        cum = int(cdf[symbol_index])
        self.encode(cum, int(cdf[symbol_index + 1]) - cum)

    def encode_symbols(self, cums: np.ndarray, freqs: np.ndarray) -> None:
        """Tight loop over precomputed per-symbol (cum, freq) arrays."""
        low, rng = self._low, self._range
        for cum, freq in zip(cums.tolist(), freqs.tolist()):
            r = rng >> PRECISION
            low += cum * r
            rng = freq * r
            while rng < _TOP:
                self._low = low
                self._shift_low()
                low = self._low
                rng = (rng << 32) & _MASK64
        self._low, self._range = low, rng

    def finish(self) -> bytes:
        """Terminate: emit the cheapest value inside the final interval."""
        if not self._done:
            # a multiple of 2^32 always fits because range >= 2^32 here
            v = (self._low + _TOP - 1) >> 32 << 32
            self._low = v
            self._shift_low()
            self._shift_low()
            while self._out and self._out[-1] == 0:
                self._out.pop()
            self._done = True
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._range = _MASK64
        self._code = (self._next_word() << 32) | self._next_word()

    def _next_word(self) -> int:
        chunk = self._data[self._pos : self._pos + 4]
        self._pos += 4
        if len(chunk) < 4:
            chunk = chunk + b"\x00" * (4 - len(chunk))
        return int.from_bytes(chunk, "big")

    def decode_symbol(self, cdf: np.ndarray) -> int:
        r = self._range >> PRECISION
        v = self._code // r
        if v >= TOTAL:
            v = TOTAL - 1
        s = int(np.searchsorted(cdf, v, side="right")) - 1
        cum = int(cdf[s])
        freq = int(cdf[s + 1]) - cum
        self._code -= cum * r
        self._range = freq * r
        if self._code >= self._range:
            raise DecodeError(f"corrupt payload near byte {self._pos}")
        while self._range < _TOP:
            self._code = ((self._code << 32) | self._next_word()) & _MASK64
            self._range = (self._range << 32) & _MASK64
        return s

    def decode_symbols(self, count: int, pmf: "DiscretePmf") -> np.ndarray:
        """Decode a run of symbols sharing one PMF (table-based lookup)."""
        lut = pmf.symbol_lut()
        cdf_list = pmf.cdf.tolist()
        lut_list = lut.tolist()
        out = np.empty(count, dtype=np.int64)
        code, rng = self._code, self._range
        for i in range(count):
            r = rng >> PRECISION
            v = code // r
            if v >= TOTAL:
                v = TOTAL - 1
            s = lut_list[v]
            cum = cdf_list[s]
            code -= cum * r
            rng = (cdf_list[s + 1] - cum) * r
            if code >= rng:
                raise DecodeError(f"corrupt payload near byte {self._pos}")
            while rng < _TOP:
                code = ((code << 32) | self._next_word()) & _MASK64
                rng = (rng << 32) & _MASK64
            out[i] = s
        self._code, self._range = code, rng
        return out


class BitWriter:
    """MSB-first raw bit buffer (escape refinements live outside the coder)."""

    def __init__(self):
        self._bits: list[int] = []

    def write_ue(self, v: int) -> None:
        x = v + 1
        k = x.bit_length() - 1
        self._bits.extend([0] * k)
        for i in range(k, -1, -1):
            self._bits.append((x >> i) & 1)

    def write_ue_array(self, values: np.ndarray) -> None:
        for v in values.tolist():
            self.write_ue(v)

    def to_bytes(self) -> bytes:
        if not self._bits:
            return b""
        arr = np.array(self._bits, dtype=np.uint8)
        return np.packbits(arr).tobytes()


class BitReader:
    def __init__(self, data: bytes):
        self._bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
        self._ones = np.flatnonzero(self._bits == 1)
        self._pos = 0

    def read_ue(self) -> int:
        i = int(np.searchsorted(self._ones, self._pos))
        if i >= len(self._ones):
            raise DecodeError("escape section exhausted")
        p1 = int(self._ones[i])
        k = p1 - self._pos
        end = p1 + 1 + k
        if end > len(self._bits):
            raise DecodeError("truncated escape code")
        x = 1
        for b in self._bits[p1 + 1 : end].tolist():
            x = (x << 1) | b
        self._pos = end
        return x - 1


def _zigzag(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=np.int64)
    return np.where(d >= 0, 2 * d, -2 * d - 1)


def _unzigzag(u: int) -> int:
    return u // 2 if u % 2 == 0 else -(u + 1) // 2


def encode_band(enc: RangeEncoder, symbols: np.ndarray, pmf: DiscretePmf,
                escapes: bool, escape_bits: "BitWriter | None" = None) -> None:
    """Code one band's symbols under a shared PMF.

    With ``escapes`` set, each boundary-symbol occurrence gets an Exp-Golomb
    distance (0 for a genuine boundary value) in the raw-bit section; a
    single-symbol support degenerates to zigzag Exp-Golomb offsets only.
    """
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    n = len(pmf.freqs)
    if escapes and escape_bits is None:
        raise UsageError("escape coding needs a bit writer")
    if n == 1 and escapes:
        escape_bits.write_ue_array(_zigzag(symbols - pmf.q_lo))
        return
    idx = np.clip(symbols - pmf.q_lo, 0, n - 1)
    if not escapes and (symbols.min(initial=pmf.q_lo) < pmf.q_lo
                        or symbols.max(initial=pmf.q_hi) > pmf.q_hi):
        raise UsageError("out-of-support symbol in a band marked escape-free")
    cdf = pmf.cdf
    cums = cdf[idx]
    freqs = cdf[idx + 1] - cums
    enc.encode_symbols(cums, freqs)
    if escapes:
        lo_hits = idx == 0
        hi_hits = idx == n - 1
        refine = np.zeros(len(symbols), dtype=np.int64)
        refine[lo_hits] = pmf.q_lo - symbols[lo_hits]
        refine[hi_hits] = symbols[hi_hits] - pmf.q_hi
        escape_bits.write_ue_array(refine[lo_hits | hi_hits])


def decode_band(dec: RangeDecoder, count: int, pmf: DiscretePmf,
                escapes: bool, escape_bits: "BitReader | None" = None) -> np.ndarray:
    n = len(pmf.freqs)
    if escapes and escape_bits is None:
        raise UsageError("escape decoding needs a bit reader")
    if n == 1 and escapes:
        return np.array([pmf.q_lo + _unzigzag(escape_bits.read_ue())
                         for _ in range(count)], dtype=np.int64)
    idx = dec.decode_symbols(count, pmf)
    out = idx + pmf.q_lo
    if escapes:
        for i in np.flatnonzero((idx == 0) | (idx == n - 1)).tolist():
            d = escape_bits.read_ue()
            out[i] = (pmf.q_lo - d) if idx[i] == 0 else (pmf.q_hi + d)
    return out

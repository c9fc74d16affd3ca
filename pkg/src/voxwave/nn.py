"""3-D convolution building blocks and gradient plumbing.

Tensors follow a (C, D, H, W) layout with no batch axis.  Float32 inference
goes through torch's native conv3d; float64 inputs are routed through a
tap-by-tap matmul implementation because torch's double-precision conv3d
falls back to an extremely slow reference kernel on CPU.  Both paths share
weights and are autograd-compatible.
"""

from __future__ import annotations

import copy
import struct
import zlib
from typing import Dict, Iterable, List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import FormatError, ShapeError, UsageError

AFFINE_FLOOR = 1e-3  # lower clamp for affine gain maps, keeps the inverse division safe


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    """Round to nearest integer, halves away from zero (torch.round is half-to-even)."""
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


class RoundSTE(torch.autograd.Function):
    """Half-away-from-zero rounding with a straight-through gradient."""

    @staticmethod
    def forward(ctx, x):
        return round_half_away(x)

    @staticmethod
    def backward(ctx, g):
        return g


def round_ste(x: torch.Tensor) -> torch.Tensor:
    return RoundSTE.apply(x)


def _conv3d_f64(x: torch.Tensor, weight: torch.Tensor, bias) -> torch.Tensor:
    """Double-precision same-size conv via per-tap matmuls (BLAS-backed)."""
    c_in, d, h, w = x.shape
    c_out, _, kd, kh, kw = weight.shape
    if kd == kh == kw == 1:
        out = (weight.reshape(c_out, c_in) @ x.reshape(c_in, -1)).reshape(c_out, d, h, w)
    else:
        xp = F.pad(x.unsqueeze(0), (1, 1, 1, 1, 1, 1)).squeeze(0)
        out = torch.zeros((c_out, d, h, w), dtype=x.dtype)
        for dz in range(kd):
            for dy in range(kh):
                for dx in range(kw):
                    patch = xp[:, dz : dz + d, dy : dy + h, dx : dx + w].reshape(c_in, -1)
                    out = out + (weight[:, :, dz, dy, dx] @ patch).reshape(c_out, d, h, w)
    if bias is not None:
        out = out + bias.view(-1, 1, 1, 1)
    return out


def causal_mask(c_out: int, c_in: int, kernel: int, include_center: bool) -> torch.Tensor:
    """Binary mask keeping taps at raster (z, y, x) positions before the center.

    Type "A" masks (``include_center=False``) zero the center tap and are used
    on the layer that first touches the signal being predicted; type "B" masks
    keep the center.
    """
    k = kernel
    center = (k * k * k) // 2
    flat = torch.arange(k * k * k)
    keep = flat < center + (1 if include_center else 0)
    mask = keep.reshape(1, 1, k, k, k).to(torch.get_default_dtype())
    return mask.expand(c_out, c_in, k, k, k).contiguous()


class Conv3d(nn.Module):
    """3-D convolution with 'same' zero padding and an optional causal mask.

    ``mask`` is None, "a" (center excluded) or "b" (center included).  Masked
    taps contribute exactly zero.  Per-input-channel mask overrides can be
    installed afterwards via :meth:`unmask_channels` for channels that carry
    already-decoded context and need no causality restriction.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int = 3,
                 mask: Optional[str] = None, zero_init: bool = False):
        super().__init__()
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.weight = nn.Parameter(torch.empty(c_out, c_in, kernel, kernel, kernel))
        self.bias = nn.Parameter(torch.empty(c_out))
        if mask not in (None, "a", "b"):
            raise UsageError(f"unknown mask kind {mask!r}")
        self.mask_kind = mask
        if mask is None:
            self.register_buffer("mask", None)
        else:
            self.register_buffer("mask", causal_mask(c_out, c_in, kernel, mask == "b"))
        init_conv(self, zero_init=zero_init)

    def unmask_channels(self, channels: Iterable[int]) -> None:
        """Lift the causality restriction for the given input channels."""
        if self.mask is None:
            raise UsageError("layer has no mask")
        for c in channels:
            self.mask[:, c] = 1.0

    def effective_weight(self) -> torch.Tensor:
        return self.weight if self.mask is None else self.weight * self.mask

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[0] != self.c_in:
            raise ShapeError(
                f"expected ({self.c_in}, D, H, W) input, got {tuple(x.shape)}"
            )
        w = self.effective_weight()
        if x.dtype == torch.float64:
            return _conv3d_f64(x, w, self.bias)
        pad = self.kernel // 2
        return F.conv3d(x.unsqueeze(0), w, self.bias, padding=pad).squeeze(0)


def conv3d(x: torch.Tensor, layer: Conv3d) -> torch.Tensor:
    return layer(x)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def tanh(x: torch.Tensor) -> torch.Tensor:
    return torch.tanh(x)


def init_conv(layer: Conv3d, zero_init: bool = False,
              generator: Optional[torch.Generator] = None) -> None:
    """Uniform [-s, s] init with s = 1/sqrt(fan_in); optionally all-zero."""
    if zero_init:
        nn.init.zeros_(layer.weight)
        nn.init.zeros_(layer.bias)
        return
    fan_in = layer.c_in * layer.kernel ** 3
    s = 1.0 / float(np.sqrt(fan_in))
    with torch.no_grad():
        layer.weight.uniform_(-s, s, generator=generator)
        layer.bias.uniform_(-s, s, generator=generator)


def reseed_module(module: nn.Module, seed: int) -> None:
    """Re-initialize every conv in the module deterministically from a seed."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, Conv3d):
            init_conv(m, zero_init=getattr(m, "_zero_init", False), generator=gen)


class ResidualBlock(nn.Module):
    """x + conv(relu(conv(x))), fixed width."""

    def __init__(self, width: int):
        super().__init__()
        self.conv1 = Conv3d(width, width)
        self.conv2 = Conv3d(width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(torch.relu(self.conv1(x)))


class PredictUpdateNet(nn.Module):
    """Three-layer 3x3x3 CNN used for lifting prediction and update steps.

    The output conv starts at zero, so an untrained transform degenerates to
    the lazy wavelet; training then learns the prediction from a clean
    slate, which converges far faster than unlearning a random filter.
    """

    def __init__(self, width: int = 16):
        super().__init__()
        self.conv1 = Conv3d(1, width)
        self.conv2 = Conv3d(width, width)
        self.conv3 = Conv3d(width, 1, zero_init=True)
        self.conv3._zero_init = True

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = torch.relu(self.conv1(x))
        y = torch.relu(self.conv2(y))
        return self.conv3(y)


class AffineNet(nn.Module):
    """Gain-map head: same trunk as PredictUpdateNet, sigmoid output clamped
    to [AFFINE_FLOOR, 1].  The last conv starts at zero so the initial gain
    is uniformly 0.5."""

    def __init__(self, width: int = 16):
        super().__init__()
        self.conv1 = Conv3d(1, width)
        self.conv2 = Conv3d(width, width)
        self.conv3 = Conv3d(width, 1, zero_init=True)
        self.conv3._zero_init = True

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = torch.relu(self.conv1(x))
        y = torch.relu(self.conv2(y))
        return torch.clamp(torch.sigmoid(self.conv3(y)), min=AFFINE_FLOOR)


class CoarseAffine(nn.Module):
    """Single trainable gain shared across all spatial positions."""

    def __init__(self):
        super().__init__()
        self.raw = nn.Parameter(torch.zeros(1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        gain = torch.clamp(torch.sigmoid(self.raw.to(x.dtype)), min=AFFINE_FLOOR)
        return gain.reshape(1, 1, 1, 1).expand_as(x)


def backward(loss: torch.Tensor, params: Iterable[torch.Tensor]) -> List[torch.Tensor]:
    """Reverse-mode gradients of a scalar loss for the given parameters."""
    if loss.dim() != 0:
        raise UsageError("loss must be a scalar")
    params = list(params)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [
        g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)
    ]


def to_double(module: nn.Module) -> nn.Module:
    """Detached double-precision copy of a module (weights shared by value)."""
    clone = copy.deepcopy(module).double()
    for p in clone.parameters():
        p.requires_grad_(False)
    return clone


# -- weight container -------------------------------------------------------
#
# Binary layout per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims,
# float32 little-endian payload.  A CRC32 (u32 LE) over all records trails
# the file.


def serialize_weights(named: Dict[str, np.ndarray]) -> bytes:
    body = bytearray()
    for name in sorted(named):
        arr = np.asarray(named[name], dtype="<f4")
        nb = name.encode("utf-8")
        body += struct.pack("<H", len(nb)) + nb
        body += struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        body += arr.tobytes()
    return bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))


def deserialize_weights(blob: bytes) -> Dict[str, np.ndarray]:
    if len(blob) < 4:
        raise FormatError("weight container truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("weight container CRC mismatch")
    out: Dict[str, np.ndarray] = {}
    pos = 0
    while pos < len(body):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", body, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", body, pos) if rank else ()
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=pos)
        pos += 4 * count
        out[name] = arr.reshape(dims).copy()
    return out


def weights_hash(named: Dict[str, np.ndarray]) -> int:
    """CRC32 identity of a weight set; stored in bitstream headers."""
    blob = serialize_weights(named)
    return zlib.crc32(blob[:-4])


def module_weights(module: nn.Module, prefix: str = "") -> Dict[str, np.ndarray]:
    """Named parameters (and buffers are excluded) as '/'-separated names."""
    out = {}
    for name, p in module.named_parameters():
        key = (prefix + "/" if prefix else "") + name.replace(".", "/")
        out[key] = p.detach().cpu().numpy()
    return out


def load_module_weights(module: nn.Module, named: Dict[str, np.ndarray],
                        prefix: str = "") -> None:
    state = {}
    for name, p in module.named_parameters():
        key = (prefix + "/" if prefix else "") + name.replace(".", "/")
        if key not in named:
            raise FormatError(f"weight file is missing tensor {key!r}")
        arr = named[key]
        if tuple(arr.shape) != tuple(p.shape):
            raise FormatError(f"tensor {key!r} has shape {arr.shape}, expected {tuple(p.shape)}")
        state[name] = torch.from_numpy(np.ascontiguousarray(arr)).to(p.dtype)
    module.load_state_dict(state, strict=False)

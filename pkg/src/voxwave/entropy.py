"""Learned probability models for quantized subband coefficients.

Both entropy models parameterize a monotone cumulative distribution c as a
composition of five small layers; symbol probabilities are finite
differences p(q) = c(q+1/2) - c(q-1/2).  Monotonicity is enforced by a
softplus reparameterization of the layer matrices and a tanh squash of the
gate coefficients.  The 58 scalars per distribution split as

    h1,b1,a1 (3 each) | h2..h4 (3x3), b2..b4, a2..a4 (3 each) | h5 (3), b5 (1)

The factorized model owns one trainable parameter set per subband and codes
subbands independently.  The context model predicts the 58 parameters per
voxel from already-coded subbands (between-band context) and from
raster-prior voxels of the current subband (within-band context, causal
masked convolutions).  Coding-time evaluation of the within path is
patch-wise so that encoder and decoder reproduce each other bit-exactly.
"""

from __future__ import annotations

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import UsageError
from .nn import Conv3d, ResidualBlock
from .rangecoder import DiscretePmf, quantize_pmf

N_PARAMS = 58
LIKELIHOOD_FLOOR = 2.0 ** -16
DEFAULT_SUPPORT_WIDTH = 4096
N_CONTEXT_SLOTS = 8  # reconstructed low-pass + up to seven coded same-level bands

# (name, rows, cols) of each cumulative-model tensor, in channel order
PARAM_LAYOUT = (
    ("h1", 3, 1), ("b1", 3, 1), ("a1", 3, 1),
    ("h2", 3, 3), ("b2", 3, 1), ("a2", 3, 1),
    ("h3", 3, 3), ("b3", 3, 1), ("a3", 3, 1),
    ("h4", 3, 3), ("b4", 3, 1), ("a4", 3, 1),
    ("h5", 1, 3), ("b5", 1, 1),
)
assert sum(r * c for _, r, c in PARAM_LAYOUT) == N_PARAMS


def eval_cumulative(x: torch.Tensor, params: Sequence[torch.Tensor]) -> torch.Tensor:
    """c(x) for a batch of points; params broadcast against x's batch shape."""
    v = x[..., None, None]
    it = iter(params)
    for k in range(5):
        h, b = next(it), next(it)
        v = torch.matmul(F.softplus(h), v) + b
        if k < 4:
            a = next(it)
            v = v + torch.tanh(a) * torch.tanh(v)
    return torch.sigmoid(v)[..., 0, 0]


def likelihood(x: torch.Tensor, params: Sequence[torch.Tensor],
               floor: float = LIKELIHOOD_FLOOR) -> torch.Tensor:
    """p = c(x + 1/2) - c(x - 1/2), floored for a finite rate term.

    The floor clamps the value only; the gradient passes through so that
    regions currently below the floor still receive training signal.
    """
    p = eval_cumulative(x + 0.5, params) - eval_cumulative(x - 0.5, params)
    return p + torch.clamp(floor - p, min=0.0).detach()


def psi_to_params(psi: torch.Tensor) -> List[torch.Tensor]:
    """Split a (V, 58) parameter tensor into per-layer (V, r, c) tensors."""
    if psi.shape[-1] != N_PARAMS:
        raise UsageError(f"expected {N_PARAMS} parameter channels, got {psi.shape[-1]}")
    out, pos = [], 0
    for _, r, c in PARAM_LAYOUT:
        out.append(psi[..., pos : pos + r * c].reshape(*psi.shape[:-1], r, c))
        pos += r * c
    return out


class CumulativeModel(nn.Module):
    """One trainable 58-parameter cumulative distribution.

    ``init_scale`` sets the rough width of the initial distribution; subband
    coefficients of low-bit-depth content land within a few hundred, so the
    default keeps initial likelihoods above the floor where gradients are
    healthiest.
    """

    def __init__(self, init_scale: float = 100.0,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        # choose a per-layer gain g with 3^4 g^5 ~= 1/init_scale so the
        # composed slope at the origin is about 1/init_scale
        gain = float((1.0 / (81.0 * init_scale)) ** 0.2)
        for name, r, c in PARAM_LAYOUT:
            t = torch.empty(r, c)
            if name.startswith("h"):
                t.fill_(float(np.log(np.expm1(gain))))
            elif name.startswith("b"):
                t.uniform_(-0.5, 0.5, generator=generator)
            else:
                t.zero_()
            setattr(self, name, nn.Parameter(t))

    def param_list(self, dtype: Optional[torch.dtype] = None,
                   detach: bool = False) -> List[torch.Tensor]:
        out = []
        for name, _, _ in PARAM_LAYOUT:
            p = getattr(self, name)
            if detach:
                p = p.detach()
            out.append(p.to(dtype) if dtype is not None else p)
        return out

    def cumulative(self, x: torch.Tensor) -> torch.Tensor:
        return eval_cumulative(x, self.param_list(dtype=x.dtype))

    def bits(self, values: torch.Tensor) -> torch.Tensor:
        """Differentiable total bits to code the given (normalized) values."""
        p = likelihood(values, self.param_list(dtype=values.dtype))
        return (-torch.log2(p)).sum()


def band_key(level: int, label: str) -> str:
    return f"{label}{level}"


class FactorizedEntropyModel(nn.Module):
    """Independent per-subband cumulative models (the low-latency variant)."""

    def __init__(self, levels: int, init_scale: float = 100.0,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        from .transform import band_order

        self.levels = levels
        self.models = nn.ModuleDict(
            {
                band_key(lv, lab): CumulativeModel(init_scale, generator)
                for lv, lab in band_order(levels)
            }
        )

    def band_model(self, level: int, label: str) -> CumulativeModel:
        return self.models[band_key(level, label)]

    def bits(self, subbands) -> torch.Tensor:
        """Total differentiable bits over a SubbandSet of normalized values."""
        total = None
        for (level, label), t in subbands.bands.items():
            b = self.band_model(level, label).bits(t.reshape(-1))
            total = b if total is None else total + b
        return total

    def pmf(self, level: int, label: str, q_lo: int, q_hi: int) -> DiscretePmf:
        """Coder-ready PMF over [q_lo, q_hi]; tails fold into the boundaries.

        Evaluated in float64 from detached weights so encoder and decoder
        derive identical tables.
        """
        model = self.band_model(level, label)
        params = model.param_list(dtype=torch.float64, detach=True)
        return pmf_from_params(params, q_lo, q_hi)


def pmf_from_params(params: Sequence[torch.Tensor], q_lo: int, q_hi: int) -> DiscretePmf:
    if q_hi < q_lo:
        raise UsageError(f"empty symbol range [{q_lo}, {q_hi}]")
    edges_x = torch.arange(q_lo, q_hi + 2, dtype=torch.float64) - 0.5
    with torch.no_grad():
        edges = eval_cumulative(edges_x, params)
    probs = np.diff(edges.numpy())
    probs = np.maximum(probs, 0.0)
    probs[0] += float(edges[0])
    probs[-1] += max(0.0, 1.0 - float(edges[-1]))
    return DiscretePmf(q_lo, quantize_pmf(probs))


def choose_support(symbols: np.ndarray,
                   max_width: int = DEFAULT_SUPPORT_WIDTH) -> Tuple[int, int, bool]:
    """Pick a PMF support for a band: the full range when narrow enough,
    else a median-centered window (escapes handle the rest)."""
    q_min = int(symbols.min())
    q_max = int(symbols.max())
    if q_max - q_min + 1 <= max_width:
        return q_min, q_max, False
    med = int(np.median(symbols))
    lo = max(q_min, med - max_width // 2 + 1)
    hi = min(q_max, lo + max_width - 1)
    lo = max(q_min, hi - max_width + 1)
    return lo, hi, True


def subband_rate(symbols: np.ndarray, pmf: DiscretePmf) -> float:
    """Ideal bits for one band under its PMF (sum of -log2 p)."""
    return pmf.bits_for(np.asarray(symbols).ravel())


class ContextEntropyModel(nn.Module):
    """Autoregressive entropy parameters from between/within-band context.

    Input channels: ``N_CONTEXT_SLOTS`` context planes (slot 0 is the
    reconstructed low-pass at the band's resolution, slots 1..7 are coded
    same-level bands; unused slots stay zero, so the first band sees a pure
    bias field) plus the current band itself on the causal path.
    """

    def __init__(self, width: int = 16):
        super().__init__()
        self.width = width
        self.extract = Conv3d(N_CONTEXT_SLOTS, width)
        self.between = nn.Sequential(ResidualBlock(width), ResidualBlock(width))
        self.within1 = Conv3d(width + 1, width, mask="a")
        self.within1.unmask_channels(range(width))  # context planes are fully coded
        self.within2 = Conv3d(width, width, mask="b")
        self.merge1 = Conv3d(2 * width, 2 * width, kernel=1)
        self.merge2 = Conv3d(2 * width, N_PARAMS, kernel=1)

    def forward(self, context: torch.Tensor, band: torch.Tensor) -> torch.Tensor:
        """Vectorized parameter map (58, D, H, W); training and tests only —
        coding uses the patch-wise evaluator below."""
        ct = self.extract(context)
        cb = self.between(ct)
        cw = self.within2(torch.relu(self.within1(torch.cat([ct, band.unsqueeze(0)]))))
        return self.merge2(torch.relu(self.merge1(torch.cat([cb, cw]))))

    def bits(self, context: torch.Tensor, band: torch.Tensor) -> torch.Tensor:
        """Differentiable bits for one band given its context planes."""
        psi = self.forward(context, band)
        v = band.numel()
        params = psi_to_params(psi.reshape(N_PARAMS, v).T)
        p = likelihood(band.reshape(-1), params)
        return (-torch.log2(p)).sum()


class PatchContextCoder:
    """Bit-reproducible per-voxel evaluation of the within/merge path.

    The between path depends only on already-coded bands and is computed
    once per band in float64; the causal path is evaluated voxel by voxel
    with fixed-order float64 dot products, identically at encode and decode.
    """

    def __init__(self, model: ContextEntropyModel, context: torch.Tensor):
        from .nn import to_double

        w = model.width
        m64 = to_double(model)
        with torch.no_grad():
            ct64 = m64.extract(context.double())
            cb64 = m64.between(ct64)
        self._cb = cb64.numpy()
        d, h, wd = context.shape[1:]
        self._dims = (d, h, wd)
        self._w1 = m64.within1.effective_weight().reshape(w, -1).numpy()
        self._b1 = m64.within1.bias.numpy()
        self._w2 = m64.within2.effective_weight().reshape(w, -1).numpy()
        self._b2 = m64.within2.bias.numpy()
        self._m1 = m64.merge1.weight.reshape(2 * w, 2 * w).numpy()
        self._c1 = m64.merge1.bias.numpy()
        self._m2 = m64.merge2.weight.reshape(N_PARAMS, 2 * w).numpy()
        self._c2 = m64.merge2.bias.numpy()
        # zero-padded working buffers: extraction output + band plane, layer-1 output
        self._in1 = np.zeros((w + 1, d + 2, h + 2, wd + 2))
        self._in1[:w, 1:-1, 1:-1, 1:-1] = ct64.numpy()
        self._l1 = np.zeros((w, d + 2, h + 2, wd + 2))

    def entropy_params(self, z: int, y: int, x: int) -> np.ndarray:
        """58 cumulative-model parameters for the voxel about to be coded."""
        patch = self._in1[:, z : z + 3, y : y + 3, x : x + 3].reshape(-1)
        l1 = np.maximum(self._w1 @ patch + self._b1, 0.0)
        self._l1[:, z + 1, y + 1, x + 1] = l1
        patch2 = self._l1[:, z : z + 3, y : y + 3, x : x + 3].reshape(-1)
        l2 = self._w2 @ patch2 + self._b2
        v = np.concatenate([self._cb[:, z, y, x], l2])
        return self._m2 @ np.maximum(self._m1 @ v + self._c1, 0.0) + self._c2

    def push_symbol(self, z: int, y: int, x: int, value: float) -> None:
        """Record the coded value so later voxels can condition on it."""
        self._in1[-1, z + 1, y + 1, x + 1] = value

    def pmf_at(self, z: int, y: int, x: int, q_lo: int, q_hi: int) -> DiscretePmf:
        psi = torch.from_numpy(self.entropy_params(z, y, x))
        return pmf_from_params(psi_to_params(psi), q_lo, q_hi)

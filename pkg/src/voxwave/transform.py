"""Multi-level 3-D decomposition built from 1-D lifting passes.

One decomposition level applies the 1-D transform along z, then y, then x,
producing eight subbands; the LLL band recurses.  Labels read (x, y, z):
"HLL" is high-pass along x, low-pass along y and z.  After N levels there
are 7N+1 bands and the total coefficient count equals the input count.

Step parameters are shared across decomposition levels.  Across axes the
sharing policy picks which axes use a common parameter set; per-axis passes
are axis-canonicalized (the lifting axis is rolled to the front) so that
shared parameters realize the identical operator in every direction they
cover.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import torch
from torch import nn

from .errors import ConfigError, FormatError, GeometryError
from .lifting import LearnedStep, StepChain, cdf53_chain, cdf97_chain, lift_forward, lift_inverse, merge, split

BAND_LABELS = ("HLL", "LHL", "HHL", "LLH", "HLH", "LHH", "HHH")

SHARING_MODES = ("share_all", "share_xy", "share_xz", "share_yz", "share_none")

# parameter-set index used by the (z, y, x) passes under each policy
_AXIS_GROUPS = {
    "share_all": (0, 0, 0),
    "share_xy": (0, 1, 1),
    "share_xz": (0, 1, 0),
    "share_yz": (0, 0, 1),
    "share_none": (0, 1, 2),
}

GRANULARITIES = ("fine", "coarse", "none")


def band_order(levels: int) -> List[Tuple[int, str]]:
    """Serialization order: deepest LLL, then levels deep-to-shallow."""
    order = [(levels, "LLL")]
    for level in range(levels, 0, -1):
        order.extend((level, lab) for lab in BAND_LABELS)
    return order


@dataclass
class SubbandSet:
    """Labeled frequency subbands of one decomposed block."""

    levels: int
    dims: Tuple[int, int, int]
    bands: Dict[Tuple[int, str], torch.Tensor]

    def __post_init__(self):
        expected = 7 * self.levels + 1
        if len(self.bands) != expected:
            raise FormatError(f"expected {expected} bands, got {len(self.bands)}")

    def ordered(self) -> List[Tuple[Tuple[int, str], torch.Tensor]]:
        return [(key, self.bands[key]) for key in band_order(self.levels)]

    def map(self, fn) -> "SubbandSet":
        return SubbandSet(self.levels, self.dims,
                          {k: fn(v) for k, v in self.bands.items()})

    def total_samples(self) -> int:
        return sum(int(v.numel()) for v in self.bands.values())


def band_dims(dims, level: int) -> Tuple[int, int, int]:
    return tuple(d >> level for d in dims)  # type: ignore[return-value]


class TransformModel(nn.Module):
    """Trainable lifting parameters for all axes under a sharing policy."""

    def __init__(self, sharing: str = "share_xy", granularity: str = "fine",
                 width: int = 16, n_steps: int = 2):
        super().__init__()
        if sharing not in _AXIS_GROUPS:
            raise ConfigError(f"unknown sharing mode {sharing!r}")
        if granularity not in GRANULARITIES:
            raise ConfigError(f"unknown affine granularity {granularity!r}")
        self.sharing = sharing
        self.granularity = granularity
        self.width = width
        self.n_steps = n_steps
        affine = None if granularity == "none" else granularity
        n_sets = max(_AXIS_GROUPS[sharing]) + 1
        self.param_sets = nn.ModuleList(
            nn.ModuleList(LearnedStep(width, affine) for _ in range(n_steps))
            for _ in range(n_sets)
        )

    def chain_for_axis(self, axis: int) -> StepChain:
        group = _AXIS_GROUPS[self.sharing][axis]
        return StepChain(list(self.param_sets[group]))

    def chains(self) -> Tuple[StepChain, StepChain, StepChain]:
        return tuple(self.chain_for_axis(a) for a in range(3))  # type: ignore


def fixed_chains(kind: str) -> Tuple[StepChain, StepChain, StepChain]:
    if kind == "cdf53":
        c = cdf53_chain()
    elif kind == "cdf97":
        c = cdf97_chain()
    else:
        raise ConfigError(f"unknown fixed transform {kind!r}")
    return (c, c, c)


def parameter_count(sharing: str, granularity: str,
                    width: int = 16, n_steps: int = 2) -> int:
    """Number of trainable scalars in the transform for a configuration."""
    model = TransformModel(sharing, granularity, width, n_steps)
    return sum(p.numel() for p in model.parameters())


def _roll_perm(axis: int) -> Tuple[int, int, int]:
    return (axis, (axis + 1) % 3, (axis + 2) % 3)


def _inv_perm(perm) -> Tuple[int, int, int]:
    inv = [0, 0, 0]
    for i, p in enumerate(perm):
        inv[p] = i
    return tuple(inv)  # type: ignore[return-value]


def lift_axis_forward(x: torch.Tensor, axis: int, chain: StepChain,
                      integer: bool, training: bool = False):
    """1-D lifting along ``axis``; the volume is rolled so the lifting axis
    leads, keeping the learned operator identical across shared axes."""
    perm = _roll_perm(axis)
    xc = x.permute(perm).contiguous()
    even, odd = split(xc, 0)
    low, high = lift_forward(even, odd, chain, integer=integer, training=training)
    inv = _inv_perm(perm)
    return low.permute(inv).contiguous(), high.permute(inv).contiguous()


def lift_axis_inverse(low: torch.Tensor, high: torch.Tensor, axis: int,
                      chain: StepChain, integer: bool) -> torch.Tensor:
    perm = _roll_perm(axis)
    lc = low.permute(perm).contiguous()
    hc = high.permute(perm).contiguous()
    even, odd = lift_inverse(lc, hc, chain, integer=integer)
    x = merge(even, odd, 0)
    return x.permute(_inv_perm(perm)).contiguous()


def forward_one_level(v: torch.Tensor, chains, integer: bool,
                      training: bool = False) -> Dict[str, torch.Tensor]:
    """One decomposition level: z, then y, then x; returns 8 labeled bands."""
    partial = {"": v}
    for axis in (0, 1, 2):
        nxt: Dict[str, torch.Tensor] = {}
        for suffix, t in partial.items():
            low, high = lift_axis_forward(t, axis, chains[axis], integer, training)
            nxt["L" + suffix] = low
            nxt["H" + suffix] = high
        partial = nxt
    return partial


def inverse_one_level(octet: Dict[str, torch.Tensor], chains,
                      integer: bool) -> torch.Tensor:
    partial = dict(octet)
    for axis in (2, 1, 0):
        nxt: Dict[str, torch.Tensor] = {}
        suffixes = {k[1:] for k in partial}
        for suffix in suffixes:
            nxt[suffix] = lift_axis_inverse(
                partial["L" + suffix], partial["H" + suffix],
                axis, chains[axis], integer,
            )
        partial = nxt
    return partial[""]


def forward_3d(v: torch.Tensor, levels: int, chains, integer: bool = False,
               training: bool = False) -> SubbandSet:
    """Full N-level decomposition of a (D, H, W) block."""
    dims = tuple(v.shape)
    m = 1 << levels
    if any(d % m != 0 for d in dims):
        raise GeometryError(f"dims {dims} not divisible by 2^{levels}")
    bands: Dict[Tuple[int, str], torch.Tensor] = {}
    cur = v
    for level in range(1, levels + 1):
        octet = forward_one_level(cur, chains, integer, training)
        for lab in BAND_LABELS:
            bands[(level, lab)] = octet[lab]
        cur = octet["LLL"]
    bands[(levels, "LLL")] = cur
    return SubbandSet(levels, dims, bands)  # type: ignore[arg-type]


def inverse_3d(s: SubbandSet, chains, integer: bool = False) -> torch.Tensor:
    """Exact inverse of :func:`forward_3d` under the same parameters."""
    for key in band_order(s.levels):
        if key not in s.bands:
            raise FormatError(f"missing band {key}")
    cur = s.bands[(s.levels, "LLL")]
    for level in range(s.levels, 0, -1):
        octet = {"LLL": cur}
        for lab in BAND_LABELS:
            octet[lab] = s.bands[(level, lab)]
        cur = inverse_one_level(octet, chains, integer)
    return cur

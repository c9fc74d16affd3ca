"""Reversible 1-D lifting steps along the leading axis of a 3-D volume.

A 1-D transform is: split into even/odd samples, then a chain of lifting
steps, each predicting the odd part from the even part and updating the even
part from the residual.  Steps come in two flavours:

* fixed two-tap filters (the classical CDF 5/3 and 9/7 pairs), with
  whole-sample symmetric boundary extension, and
* learned steps, where prediction/update are 3-D CNNs and an optional gain
  map rescales residual and update ("affine" lifting).

In integer mode the prediction and update are rounded half-away-from-zero
before use, the gain maps are forced to 1, and the chain is exactly
invertible on integer inputs.  All lifting arithmetic runs in the dtype of
the input tensor (float64 on the codec path).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import torch
from torch import nn

from .errors import ConfigError, GeometryError, NumericError
from .nn import AffineNet, CoarseAffine, PredictUpdateNet, round_half_away, round_ste

# Lifting factorization constants for the CDF 9/7 filter pair.
CDF97_ALPHA = -1.586134342059924
CDF97_BETA = -0.052980118572961
CDF97_GAMMA = 0.882911075530934
CDF97_DELTA = 0.443506852043971
CDF97_ZETA = 1.1496043988602418


def split(x: torch.Tensor, axis: int = 0) -> Tuple[torch.Tensor, torch.Tensor]:
    """Even/odd polyphase split along the given axis (length must be even)."""
    if x.shape[axis] % 2 != 0:
        raise GeometryError(f"axis {axis} has odd length {x.shape[axis]}")
    even = x.index_select(axis, torch.arange(0, x.shape[axis], 2))
    odd = x.index_select(axis, torch.arange(1, x.shape[axis], 2))
    return even, odd


def merge(even: torch.Tensor, odd: torch.Tensor, axis: int = 0) -> torch.Tensor:
    """Inverse of :func:`split`."""
    if even.shape != odd.shape:
        raise GeometryError("even/odd parts differ in shape")
    stacked = torch.stack((even, odd), dim=axis + 1)
    shape = list(even.shape)
    shape[axis] *= 2
    return stacked.reshape(shape)


@dataclass
class FixedStep:
    """Two-tap prediction (offsets 0, +1 on the even grid) and update
    (offsets -1, 0 on the residual grid) with symmetric edge clamping."""

    predict_taps: Tuple[float, float]
    update_taps: Tuple[float, float]

    def predict(self, even: torch.Tensor) -> torch.Tensor:
        c0, c1 = self.predict_taps
        nxt = torch.cat([even[1:], even[-1:]], dim=0)
        return c0 * even + c1 * nxt

    def update(self, high: torch.Tensor) -> torch.Tensor:
        cm1, c0 = self.update_taps
        prv = torch.cat([high[:1], high[:-1]], dim=0)
        return cm1 * prv + c0 * high


class LearnedStep(nn.Module):
    """Learned lifting step: CNN prediction/update plus optional gain maps.

    ``affine_a``/``affine_b`` are None (additive lifting), an AffineNet
    (per-voxel gains) or a CoarseAffine (one trainable gain each).
    """

    def __init__(self, width: int = 16, affine: Optional[str] = None):
        super().__init__()
        self.predict_net = PredictUpdateNet(width)
        self.update_net = PredictUpdateNet(width)
        if affine is None:
            self.affine_a = self.affine_b = None
        elif affine == "fine":
            self.affine_a = AffineNet(width)
            self.affine_b = AffineNet(width)
        elif affine == "coarse":
            self.affine_a = CoarseAffine()
            self.affine_b = CoarseAffine()
        else:
            raise ConfigError(f"unknown affine granularity {affine!r}")

    def _run(self, net: nn.Module, t: torch.Tensor) -> torch.Tensor:
        # nets evaluate at their parameter dtype; lifting arithmetic keeps the
        # input dtype (float64 on the codec path, where exactness lives in the
        # rounding, not in the network precision)
        p_dtype = next((p.dtype for p in net.parameters()), t.dtype)
        if t.dtype != p_dtype:
            return net(t.to(p_dtype).unsqueeze(0)).squeeze(0).to(t.dtype)
        return net(t.unsqueeze(0)).squeeze(0)

    def predict(self, even: torch.Tensor) -> torch.Tensor:
        return self._run(self.predict_net, even)

    def update(self, high: torch.Tensor) -> torch.Tensor:
        return self._run(self.update_net, high)

    def gain_a(self, even: torch.Tensor) -> Optional[torch.Tensor]:
        if self.affine_a is None:
            return None
        return self._run(self.affine_a, even)

    def gain_b(self, high: torch.Tensor) -> Optional[torch.Tensor]:
        if self.affine_b is None:
            return None
        return self._run(self.affine_b, high)


Step = Union[FixedStep, LearnedStep]


@dataclass
class StepChain:
    """A full 1-D transform: lifting steps plus an optional (low, high)
    output scaling that only applies in float mode."""

    steps: Sequence[Step]
    scale: Optional[Tuple[float, float]] = None


def cdf53_chain() -> StepChain:
    return StepChain([FixedStep((0.5, 0.5), (0.25, 0.25))])


def cdf97_chain() -> StepChain:
    return StepChain(
        [
            FixedStep((-CDF97_ALPHA, -CDF97_ALPHA), (CDF97_BETA, CDF97_BETA)),
            FixedStep((-CDF97_GAMMA, -CDF97_GAMMA), (CDF97_DELTA, CDF97_DELTA)),
        ],
        scale=(CDF97_ZETA, 1.0 / CDF97_ZETA),
    )


def cdf97_step_params() -> dict:
    """The CDF 9/7 lifting parameters (two predict/update pairs plus scaling)."""
    return {
        "alpha": CDF97_ALPHA,
        "beta": CDF97_BETA,
        "gamma": CDF97_GAMMA,
        "delta": CDF97_DELTA,
        "zeta": CDF97_ZETA,
    }


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(t).all()):
        raise NumericError(f"{what} produced non-finite values")


def lift_forward(
    even: torch.Tensor,
    odd: torch.Tensor,
    chain: StepChain,
    integer: bool = False,
    training: bool = False,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Run the lifting chain forward, returning (low, high).

    Integer mode rounds prediction/update (straight-through when training)
    and ignores gain maps, so integer inputs give integer outputs.
    """
    rnd = round_ste if training else round_half_away
    low, high = even, odd
    for step in chain.steps:
        p = step.predict(low)
        if integer:
            high = high - rnd(p)
        else:
            a = step.gain_a(low) if isinstance(step, LearnedStep) else None
            high = (high - p) if a is None else a * (high - p)
        u = step.update(high)
        if integer:
            low = low + rnd(u)
        else:
            b = step.gain_b(high) if isinstance(step, LearnedStep) else None
            low = (low + u) if b is None else b * (low + u)
    if chain.scale is not None and not integer:
        low = low * chain.scale[0]
        high = high * chain.scale[1]
    if not training:
        _check_finite(low, "lifting")
        _check_finite(high, "lifting")
    return low, high


def lift_inverse(
    low: torch.Tensor,
    high: torch.Tensor,
    chain: StepChain,
    integer: bool = False,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Exact inverse of :func:`lift_forward` (bit-exact in integer mode)."""
    if chain.scale is not None and not integer:
        low = low / chain.scale[0]
        high = high / chain.scale[1]
    for step in reversed(chain.steps):
        u = step.update(high)
        if integer:
            low = low - round_half_away(u)
        else:
            b = step.gain_b(high) if isinstance(step, LearnedStep) else None
            low = (low if b is None else low / b) - u
        p = step.predict(low)
        if integer:
            high = high + round_half_away(p)
        else:
            a = step.gain_a(low) if isinstance(step, LearnedStep) else None
            high = (high if a is None else high / a) + p
    return low, high

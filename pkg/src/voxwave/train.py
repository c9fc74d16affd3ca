"""Rate-distortion training of the codec at desk scale.

The loss is bits-per-voxel plus lambda times the mean squared sample error
(raw sample units); lossless configurations drop the distortion term and
train through straight-through rounding.  The schedule runs three stages:
entropy (+ post-processing) with the transform frozen, then the transform
with the entropy side frozen, then everything jointly.  The best model by
validation loss is returned.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .codec import CodecConfig, CodecModel, build_model
from .errors import ConfigError, TrainingDivergedError
from .quant import QuantConfig, surrogate
from .transform import band_dims, band_order, forward_3d, inverse_3d

LAMBDA_GRID = (1.0, 4.0, 16.0, 64.0, 128.0)

DEFAULT_STAGES = (
    (("entropy", "post"), 2000),
    (("transform",), 2000),
    (("transform", "entropy", "post"), 6000),
)


@dataclass
class TrainConfig:
    lambda_: float = 16.0
    lr: float = 1e-4
    stages: Sequence[Tuple[Tuple[str, ...], int]] = DEFAULT_STAGES
    crop: Tuple[int, int, int] = (16, 16, 16)
    seed: int = 0
    val_interval: int = 200
    val_volumes: int = 4
    surrogate: str = "uniform_noise"
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def __post_init__(self):
        if self.lambda_ <= 0:
            raise ConfigError("lambda must be positive")


@dataclass
class TrainLogEntry:
    stage: int
    step: int
    rate_bits: float
    mse: float
    loss: float


def _module_params(model: CodecModel, name: str):
    if name == "transform":
        return [] if model.transform is None else list(model.transform.parameters())
    if name == "entropy":
        mod = model.entropy if model.config.entropy == "factorized" else model.context
        return list(mod.parameters())
    if name == "post":
        return list(model.post.parameters())
    raise ConfigError(f"unknown module group {name!r}")


def _context_rate_bits(model: CodecModel, bands, qs: float) -> torch.Tensor:
    """Differentiable context-model rate over a SubbandSet of coefficients."""
    from .entropy import N_CONTEXT_SLOTS
    from .transform import BAND_LABELS, inverse_one_level

    levels = model.config.levels
    total = None
    lowpass: Dict[int, torch.Tensor] = {levels: bands.bands[(levels, "LLL")]}
    for level in range(levels - 1, 0, -1):
        octet = {"LLL": lowpass[level + 1]}
        for lab in BAND_LABELS:
            octet[lab] = bands.bands[(level + 1, lab)]
        lowpass[level] = inverse_one_level(octet, model.chains(), integer=False)
    for (level, label) in band_order(levels):
        band = bands.bands[(level, label)] / qs
        dims = tuple(band.shape)
        planes = torch.zeros((N_CONTEXT_SLOTS,) + dims, dtype=band.dtype)
        if label != "LLL":
            planes[0] = lowpass[level] / qs
            for j, lab in enumerate(_labels_before(label)):
                planes[1 + j] = bands.bands[(level, lab)] / qs
        b = model.context.bits(planes, band)
        total = b if total is None else total + b
    return total


def _labels_before(label: str):
    from .transform import BAND_LABELS

    return BAND_LABELS[: BAND_LABELS.index(label)]


def loss(x: torch.Tensor, model: CodecModel, cfg: TrainConfig,
         generator: Optional[torch.Generator] = None,
         training: bool = True) -> Tuple[torch.Tensor, float, float]:
    """(loss, rate bits/voxel, mse) for one crop, differentiable in training."""
    ccfg = model.config
    n = x.numel()
    if ccfg.lossless:
        bands = forward_3d(x, ccfg.levels, model.chains(), integer=True,
                           training=training)
        if ccfg.entropy == "factorized":
            rate_bits = model.entropy.bits(bands)
        else:
            rate_bits = _context_rate_bits(model, bands, 1.0)
        total = rate_bits / n
        mse = 0.0
    else:
        bands = forward_3d(x, ccfg.levels, model.chains(), training=training)
        qcfg = QuantConfig(ccfg.qs, cfg.surrogate)
        if training:
            coded = surrogate(bands, qcfg, generator=generator)
        else:
            from .quant import dequantize, quantize

            coded = dequantize(quantize(bands, qcfg), qcfg)
        if ccfg.entropy == "factorized":
            rate_bits = model.entropy.bits(coded.map(lambda t: t / ccfg.qs))
        else:
            rate_bits = _context_rate_bits(model, coded, ccfg.qs)
        recon = inverse_3d(coded, model.chains())
        recon = model.post(recon)
        mse_t = torch.mean((x - recon) ** 2)
        total = rate_bits / n + cfg.lambda_ * mse_t
        mse = float(mse_t.detach())
    if not torch.isfinite(total):
        raise TrainingDivergedError(
            f"non-finite loss (rate={float(rate_bits.detach()):.3g}, mse={mse:.3g})"
        )
    return total, float(rate_bits.detach()) / n, mse


def _crop_from(rng: np.random.Generator, vol: np.ndarray, crop) -> torch.Tensor:
    starts = [int(rng.integers(0, s - c + 1)) if s > c else 0
              for s, c in zip(vol.shape, crop)]
    view = vol[starts[0]:starts[0] + crop[0],
               starts[1]:starts[1] + crop[1],
               starts[2]:starts[2] + crop[2]]
    return torch.from_numpy(np.ascontiguousarray(view)).float()


def validate(model: CodecModel, volumes: Sequence[np.ndarray], cfg: TrainConfig) -> float:
    """Mean deterministic loss (hard quantization) over validation crops."""
    vals = []
    with torch.no_grad():
        for vol in volumes:
            x = torch.from_numpy(vol[: cfg.crop[0], : cfg.crop[1], : cfg.crop[2]]).float()
            total, _, _ = loss(x, model, cfg, training=False)
            vals.append(float(total))
    return float(np.mean(vals))


def train(dataset: Sequence[np.ndarray], cfg: TrainConfig,
          model: Optional[CodecModel] = None,
          codec_config: Optional[CodecConfig] = None,
          val_set: Optional[Sequence[np.ndarray]] = None,
          log: Optional[List[TrainLogEntry]] = None) -> Tuple[CodecModel, List[TrainLogEntry]]:
    """Run the stage schedule and return the best-validation model."""
    if len(dataset) < 1:
        raise ConfigError("training needs at least one volume")
    torch.manual_seed(cfg.seed)
    if model is None:
        model = build_model(codec_config or CodecConfig(), seed=cfg.seed)
    if val_set is None:
        val_set = dataset[: cfg.val_volumes]
    log = [] if log is None else log
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    best_state = copy.deepcopy(model.state_dict())
    best_val = validate(model, val_set, cfg)

    for stage_idx, (groups, steps) in enumerate(cfg.stages):
        params = []
        for g in groups:
            params.extend(_module_params(model, g))
        params = [p for p in params if p.requires_grad]
        if not params or steps <= 0:
            continue
        opt = torch.optim.Adam(params, lr=cfg.lr)
        initial = None
        over = 0
        for step in range(steps):
            vol = dataset[int(rng.integers(0, len(dataset)))]
            x = _crop_from(rng, vol, cfg.crop)
            total, rate, mse = loss(x, model, cfg, generator=gen)
            opt.zero_grad()
            total.backward()
            opt.step()
            cur = float(total.detach())
            log.append(TrainLogEntry(stage_idx, step, rate, mse, cur))
            if initial is None:
                initial = abs(cur) + 1e-9
            if cur > cfg.divergence_factor * initial:
                over += 1
                if over >= cfg.divergence_patience:
                    raise TrainingDivergedError(
                        f"loss stuck above {cfg.divergence_factor}x initial "
                        f"for {over} steps in stage {stage_idx}"
                    )
            else:
                over = 0
            if (step + 1) % cfg.val_interval == 0 or step == steps - 1:
                val = validate(model, val_set, cfg)
                if val < best_val:
                    best_val = val
                    best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    return model, log


def write_log_csv(path, log: Sequence[TrainLogEntry]) -> None:
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["stage", "step", "rate_bits", "mse", "loss"])
        for e in log:
            w.writerow([e.stage, e.step, f"{e.rate_bits:.6f}", f"{e.mse:.6f}",
                        f"{e.loss:.6f}"])

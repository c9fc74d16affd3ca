"""Synthetic volumetric training corpus.

Volumes are sums of random anisotropic Gaussian blobs over a smooth ramp,
plus band-limited noise (white noise shaped by a Gaussian in Fourier
space), quantized to the requested bit depth.  This stands in for the
microscopy/CT material the codec targets; real datasets are external.
"""

from __future__ import annotations

from typing import List, Tuple

import numpy as np


def _bandlimited_noise(rng: np.random.Generator, dims, cutoff: float) -> np.ndarray:
    white = rng.standard_normal(dims)
    spectrum = np.fft.rfftn(white)
    freqs = [np.fft.fftfreq(n) for n in dims[:-1]] + [np.fft.rfftfreq(dims[-1])]
    fz, fy, fx = np.meshgrid(*freqs, indexing="ij")
    f2 = fz ** 2 + fy ** 2 + fx ** 2
    spectrum *= np.exp(-f2 / (2 * cutoff ** 2))
    out = np.fft.irfftn(spectrum, s=dims, axes=(0, 1, 2))
    out /= max(out.std(), 1e-9)
    return out


def synthetic_volume(rng: np.random.Generator, dims=(32, 32, 32), bit_depth: int = 8,
                     n_blobs: int = 6, noise_level: float = 0.02) -> np.ndarray:
    """One synthetic volume with values in [0, 2**bit_depth - 1]."""
    grid = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
    field = np.zeros(dims)
    for _ in range(n_blobs):
        center = [rng.uniform(0, n) for n in dims]
        sigmas = [rng.uniform(0.08, 0.35) * n for n in dims]
        amp = rng.uniform(0.3, 1.0)
        r2 = sum(((g - c) / s) ** 2 for g, c, s in zip(grid, center, sigmas))
        field += amp * np.exp(-0.5 * r2)
    ramp = sum(rng.uniform(-0.3, 0.3) * g / n for g, n in zip(grid, dims))
    field += ramp
    field += noise_level * _bandlimited_noise(rng, dims, cutoff=0.15)
    field -= field.min()
    peak = field.max()
    if peak > 0:
        field /= peak
    top = 2 ** bit_depth - 1
    return np.floor(field * top + 0.5)


def make_corpus(n: int, dims=(32, 32, 32), bit_depth: int = 8,
                seed: int = 0) -> List[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [synthetic_volume(rng, dims, bit_depth) for _ in range(n)]

"""Reconstruction-quality and spectral summaries: PSNR, windowed SSIM with
periodic boundaries, and shell-binned power spectra.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .field import Field, _fft
from .noise import mode_radii

__all__ = ["psnr", "ssim", "SpectrumEstimate", "power_spectrum",
           "MetricsRow", "append_metrics_row"]


def psnr(x: Field, ref: Field, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical inputs."""
    if x.dims != ref.dims:
        raise ValueError("dims mismatch")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((x.data - ref.data) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int = 11, sd: float = 1.5, ndim: int = 2) -> np.ndarray:
    half = (size - 1) / 2.0
    g = np.exp(-0.5 * ((np.arange(size) - half) / sd) ** 2)
    w = g if ndim == 1 else np.outer(g, g)
    return w / w.sum()


def _circular_filter(a: np.ndarray, window: np.ndarray) -> np.ndarray:
    # Periodic windowed mean via FFT; the kernel is centered so the output
    # stays aligned with the input grid.
    kernel = np.zeros_like(a)
    size = window.shape[0]
    half = size // 2
    if a.ndim == 1:
        idx = (np.arange(size) - half) % a.shape[0]
        np.add.at(kernel, idx, window)
    else:
        ii = (np.arange(size) - half) % a.shape[0]
        jj = (np.arange(size) - half) % a.shape[1]
        np.add.at(kernel, (ii[:, None], jj[None, :]), window)
    return np.fft.ifftn(np.fft.fftn(a) * np.fft.fftn(kernel)).real


def ssim(x: Field, ref: Field, window_size: int = 11, window_sd: float = 1.5,
         peak: float = 1.0) -> float:
    """Mean local structural similarity with a Gaussian window.

    Uses the reference windowed-statistics form (11x11 Gaussian window of
    sd 1.5, C1 = (0.01 peak)^2, C2 = (0.03 peak)^2) with periodic boundary
    handling, for grayscale fields scaled to [0, peak].
    """
    if x.dims != ref.dims:
        raise ValueError("dims mismatch")
    if min(x.dims) < window_size:
        raise ValueError(f"field dims {x.dims} smaller than the {window_size}-wide window")
    w = _gaussian_window(window_size, window_sd, ndim=len(x.dims))
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    a, b = x.data, ref.data
    mu_a = _circular_filter(a, w)
    mu_b = _circular_filter(b, w)
    var_a = _circular_filter(a * a, w) - mu_a**2
    var_b = _circular_filter(b * b, w) - mu_b**2
    cov = _circular_filter(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class SpectrumEstimate:
    """Shell-binned spectral power: centers, per-bin means, and counts."""

    bin_centers: np.ndarray
    mean_power: np.ndarray
    counts: np.ndarray


def power_spectrum(f: Field, n_bins: int | None = None) -> SpectrumEstimate:
    """Mean |DFT|^2 over integer-radius shells, DC mode excluded.

    With `n_bins` given, consecutive shells are grouped into that many
    equal-width radius bins; bin centers are count-weighted mean radii, so
    slope fits on (log center, log power) behave sensibly.
    """
    power = np.abs(_fft(f.data)) ** 2
    radii = mode_radii(f.dims)
    keep = radii > 0
    shells = np.rint(radii[keep]).astype(np.intp)
    power, radii = power[keep], radii[keep]
    r_max = shells.max()
    if n_bins is None or n_bins >= r_max:
        groups = shells - 1
        n_groups = r_max
    else:
        edges = np.linspace(0.5, r_max + 0.5, n_bins + 1)
        groups = np.clip(np.searchsorted(edges, shells, side="right") - 1, 0,
                         n_bins - 1)
        n_groups = n_bins
    counts = np.bincount(groups, minlength=n_groups)
    sums = np.bincount(groups, weights=power, minlength=n_groups)
    r_sums = np.bincount(groups, weights=radii, minlength=n_groups)
    nonempty = counts > 0
    return SpectrumEstimate(
        bin_centers=r_sums[nonempty] / counts[nonempty],
        mean_power=sums[nonempty] / counts[nonempty],
        counts=counts[nonempty],
    )


@dataclass
class MetricsRow:
    image_id: str
    method: str
    sigma: float
    index: float
    psnr_sample: float
    psnr_mean: float
    ssim_sample: float
    ssim_mean: float


METRICS_COLUMNS = ["image_id", "method", "sigma", "index",
                   "psnr_sample", "psnr_mean", "ssim_sample", "ssim_mean"]


def append_metrics_row(path, row: MetricsRow) -> None:
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(METRICS_COLUMNS)
        writer.writerow([row.image_id, row.method, repr(row.sigma),
                         repr(row.index), repr(row.psnr_sample),
                         repr(row.psnr_mean), repr(row.ssim_sample),
                         repr(row.ssim_mean)])

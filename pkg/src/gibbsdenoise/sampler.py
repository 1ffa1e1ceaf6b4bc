"""Diffusion-based sampling of the signal conditional p(x | y, params).

The observation is rescaled onto the forward process at the time t* where
the forward noise ratio matches sigma, then the discrete reverse process
runs from the snapped grid index down to zero. Per-step noise injections
are colored by the current spectral parameters, matching the diffusion
term of the reverse SDE.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import Field, RngStream
from .noise import (POWER_LAW, NoiseParams, PowerSpectrum, _colored_noise_array)
from .schedule import DiffusionSchedule, max_sigma, noise_to_time
from .score import NoisePredictor

__all__ = ["ReverseRunConfig", "ReverseRunInfo", "sample_conditional",
           "sample_conditional_info", "posterior_mean_estimate", "SIGMA_FLOOR"]

# Strictly positive noise floor; the reverse process is undefined at sigma=0.
SIGMA_FLOOR = 1e-3


@dataclass
class ReverseRunConfig:
    schedule: DiffusionSchedule
    predictor: NoisePredictor
    spectrum: PowerSpectrum = POWER_LAW
    stochastic: bool = True           # ancestral; False gives the deterministic variant
    record_trajectory: bool = False
    trajectory_stride: int = 10
    renormalize_spectrum: bool = False  # stability knob: scale S to max 1 per step


@dataclass
class ReverseRunInfo:
    t_star: float = 0.0
    start_index: int = 0
    snap_error: float = 0.0           # |b/a at snapped time - sigma|
    spectrum_condition: float = 1.0   # max S / min S over modes
    trajectory: list = dc_field(default_factory=list)


def sample_conditional(y: Field, params: NoiseParams, cfg: ReverseRunConfig,
                       rng: RngStream) -> Field:
    """One approximate draw from p(x | y, params)."""
    out, _ = sample_conditional_info(y, params, cfg, rng)
    return out


def sample_conditional_info(y: Field, params: NoiseParams, cfg: ReverseRunConfig,
                            rng: RngStream):
    """As `sample_conditional`, also returning per-run metadata."""
    sched = cfg.schedule
    sigma = max(params.sigma, SIGMA_FLOOR)
    cap = max_sigma(sched)
    if sigma > cap:
        raise ValueError(f"sigma={sigma:.6g} exceeds schedule capacity {cap:.6g}")
    spectral = params.spectral

    t_star = noise_to_time(sched, sigma)
    i_star = sched.time_index(t_star)
    a_grid = np.sqrt(sched.alpha_bars)
    b_grid = np.sqrt(1.0 - sched.alpha_bars)
    info = ReverseRunInfo(t_star=t_star, start_index=i_star)
    if i_star > 0:
        info.snap_error = abs(b_grid[i_star] / a_grid[i_star] - sigma)

    s_modes = cfg.spectrum.evaluate(spectral, y.dims)
    info.spectrum_condition = float(s_modes.max() / s_modes.min())
    scale = float(s_modes.max()) if cfg.renormalize_spectrum else 1.0

    z = a_grid[i_star] * y.data
    if cfg.record_trajectory:
        info.trajectory.append(Field(z.copy()))

    predictor = cfg.predictor
    alphas, betas = sched.alphas, sched.betas_discrete
    alpha_bars = sched.alpha_bars
    for k in range(i_star, 0, -1):
        t_k = sched.grid[k]
        m = predictor.predict_array(z, t_k, spectral)
        if cfg.stochastic:
            z = (z - betas[k] / b_grid[k] * m) / np.sqrt(alphas[k])
            if k > 1:
                # DDPM posterior variance; the final step injects no noise.
                beta_tilde = betas[k] * (1.0 - alpha_bars[k - 1]) / (1.0 - alpha_bars[k])
                noise = _colored_noise_array(spectral, y.dims, rng, cfg.spectrum)
                z = z + np.sqrt(beta_tilde / scale) * noise
        else:
            # Deterministic marginal-preserving variant (no noise injection):
            # reconstruct x0 from the prediction and step along the schedule.
            x0_hat = (z - b_grid[k] * m) / a_grid[k]
            z = a_grid[k - 1] * x0_hat + b_grid[k - 1] * m
        if not np.all(np.isfinite(z)):
            raise FloatingPointError(f"non-finite state at reverse step {k}")
        if cfg.record_trajectory and (k - 1) % cfg.trajectory_stride == 0:
            info.trajectory.append(Field(z.copy()))
    return Field(z), info


def posterior_mean_estimate(samples) -> Field:
    """Pointwise mean of retained posterior samples."""
    samples = list(samples)
    if not samples:
        raise ValueError("empty sample list")
    dims = samples[0].dims
    acc = np.zeros(dims)
    for f in samples:
        if f.dims != dims:
            raise ValueError("sample dims mismatch")
        acc += f.data
    return Field(acc / len(samples))

"""Variance-preserving diffusion schedule: beta(t), its integral, the
closed-form mixing coefficients a(t), b(t), and the noise-level-to-time map.

beta is linear in t on [0, 1], so F(t) = int_0^t beta/2 is quadratic and
everything has closed forms: a = exp(-F), b = sqrt(1 - exp(-2F)), hence
a^2 + b^2 = 1 and the noise ratio b/a = sqrt(exp(2F) - 1) is monotone.
(b is increasing whenever g >= b sqrt(2f); the VP closed form satisfies
that for every t, so no runtime check is installed.)
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import Field, RngStream
from .noise import POWER_LAW, PowerSpectrum, _colored_noise_array

__all__ = ["DiffusionSchedule", "schedule_eval", "noise_to_time", "max_sigma",
           "forward_marginal_sample"]


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear-beta VP schedule with a uniform discrete time grid."""

    beta_min: float = 0.1
    beta_max: float = 20.0
    n_steps: int = 1000
    grid: np.ndarray = dc_field(init=False, repr=False)
    alpha_bars: np.ndarray = dc_field(init=False, repr=False)
    alphas: np.ndarray = dc_field(init=False, repr=False)
    betas_discrete: np.ndarray = dc_field(init=False, repr=False)

    def __post_init__(self):
        if not (self.beta_min > 0 and self.beta_max >= self.beta_min):
            raise ValueError("need 0 < beta_min <= beta_max")
        if self.n_steps < 1:
            raise ValueError("n_steps must be positive")
        grid = np.linspace(0.0, 1.0, self.n_steps + 1)
        # Discrete chain tied exactly to the continuous marginals:
        # alpha_bar_i = a(t_i)^2, so sqrt(alpha_bar) = a and
        # sqrt(1 - alpha_bar) = b at every grid time.
        alpha_bars = np.exp(-2.0 * self._big_f(grid))
        alphas = np.ones_like(alpha_bars)
        alphas[1:] = alpha_bars[1:] / alpha_bars[:-1]
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "betas_discrete", 1.0 - alphas)

    def _big_f(self, t):
        return 0.5 * (self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t)

    def beta(self, t):
        return self.beta_min + (self.beta_max - self.beta_min) * t

    def hash(self) -> str:
        key = f"{self.beta_min!r}:{self.beta_max!r}:{self.n_steps}"
        return hashlib.sha256(key.encode()).hexdigest()[:16]

    def time_index(self, t: float) -> int:
        """Nearest discrete grid index for a continuous time."""
        return int(round(float(t) * self.n_steps))


def schedule_eval(s: DiffusionSchedule, t: float):
    """(a, b, beta, F) at time t in [0, 1]."""
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    big_f = s._big_f(t)
    a = math.exp(-big_f)
    b = math.sqrt(max(0.0, 1.0 - math.exp(-2.0 * big_f)))
    return a, b, s.beta(t), big_f


def max_sigma(s: DiffusionSchedule) -> float:
    """Largest noise level the schedule can absorb, b(1)/a(1)."""
    return math.sqrt(math.expm1(2.0 * s._big_f(1.0)))


def noise_to_time(s: DiffusionSchedule, sigma: float) -> float:
    """Solve b(t)/a(t) = sigma for t, i.e. F(t) = ln(1 + sigma^2)/2.

    Uses the closed-form positive root of the quadratic in t, polished by
    Newton steps so |b(t)/a(t) - sigma| <= 1e-12 (1 + sigma).
    """
    sigma = float(sigma)
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    cap = max_sigma(s)
    if sigma > cap * (1.0 + 1e-12):
        raise ValueError(
            f"noise level exceeds schedule capacity: sigma={sigma:.6g} > b(1)/a(1)={cap:.6g}"
        )
    if sigma == 0.0:
        return 0.0
    target = 0.5 * math.log1p(sigma * sigma)
    half_slope = 0.5 * (s.beta_max - s.beta_min)
    if half_slope > 0:
        # (half_slope/2) t^2 + (beta_min/2) t - target = 0
        disc = 0.25 * s.beta_min**2 + 2.0 * half_slope * target
        t = (-0.5 * s.beta_min + math.sqrt(disc)) / half_slope
    else:
        t = 2.0 * target / s.beta_min
    t = min(max(t, 0.0), 1.0)
    # Newton polish on F(t) - target; F' = beta/2 > 0
    for _ in range(4):
        resid = s._big_f(t) - target
        t = min(max(t - resid / (0.5 * s.beta(t)), 0.0), 1.0)
    a, b, _, _ = schedule_eval(s, t)
    if abs(b / a - sigma) > 1e-12 * (1.0 + sigma):
        # Bisection fallback; F is strictly increasing.
        lo, hi = 0.0, 1.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if s._big_f(mid) < target:
                lo = mid
            else:
                hi = mid
        t = 0.5 * (lo + hi)
    return t


def forward_marginal_sample(s: DiffusionSchedule, x: Field, t: float, spectral,
                            rng: RngStream,
                            spectrum: PowerSpectrum = POWER_LAW) -> Field:
    """Draw z_t = a(t) x + b(t) eps' with eps' a unit-amplitude colored field."""
    a, b, _, _ = schedule_eval(s, t)
    if b == 0.0:
        return x
    eps = _colored_noise_array(spectral, x.dims, rng, spectrum)
    return Field(a * x.data + b * eps)

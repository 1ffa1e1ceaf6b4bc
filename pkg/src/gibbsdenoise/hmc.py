"""Hamiltonian Monte Carlo on a compact box: leapfrog with elastic boundary
collisions, random trajectory lengths, dual-averaging step-size adaptation,
and warm-up mass-matrix estimation.

The sampler targets the noise-parameter posterior p(params | residual), but
the engine is generic over any target exposing a log density and gradient,
which is how the known-target calibration tests drive it.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import Field, RngStream
from .noise import (NoiseParams, PowerSpectrum, POWER_LAW, PriorBox,
                    SpectralPower, log_likelihood_and_grad)

__all__ = [
    "HmcConfig",
    "HmcTuning",
    "MassMatrix",
    "DualAveraging",
    "FlatTarget",
    "GaussianTarget",
    "PhiPosteriorTarget",
    "leapfrog_reflective",
    "hmc_step",
    "adapt",
    "estimate_inverse_mass",
    "warmup_adapt",
    "sample_target",
    "run_hmc",
]


@dataclass
class HmcConfig:
    target_accept: float = 0.65
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75
    warmup_iters: int = 300
    steps_min: int = 5
    steps_max: int = 15
    init_step_size: float = 0.1
    divergence_threshold: float = 1000.0
    transitions_per_sample: int = 1

    def __post_init__(self):
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.steps_min < 1 or self.steps_max < self.steps_min:
            raise ValueError("invalid leapfrog steps range")


class MassMatrix:
    """Diagonal or dense positive-definite mass, stored via its inverse."""

    def __init__(self, inverse, dim: int | None = None):
        inv = np.asarray(inverse, dtype=np.float64)
        if inv.ndim == 1:
            if np.any(inv <= 0):
                raise ValueError("inverse mass diagonal must be positive")
            self.diag = True
            self.inv = inv.copy()
            self._p_scale = 1.0 / np.sqrt(inv)
        elif inv.ndim == 2:
            self.diag = False
            self.inv = 0.5 * (inv + inv.T)
            # Momenta are N(0, M); with M^{-1} = L L^T, M = L^{-T} L^{-1}
            # and p = L^{-T} xi has the right covariance.
            chol_inv = np.linalg.cholesky(self.inv)
            self._p_transform = np.linalg.inv(chol_inv).T
        else:
            raise ValueError("mass inverse must be a vector or matrix")
        self.dim = self.inv.shape[0]
        if dim is not None and self.dim != dim:
            raise ValueError("mass dimension mismatch")

    @staticmethod
    def identity(dim: int) -> "MassMatrix":
        return MassMatrix(np.ones(dim))

    def sample_momentum(self, rng: RngStream) -> np.ndarray:
        xi = rng.standard_normal(self.dim)
        return self._p_scale * xi if self.diag else self._p_transform @ xi

    def velocity(self, p: np.ndarray) -> np.ndarray:
        return self.inv * p if self.diag else self.inv @ p

    def kinetic(self, p: np.ndarray) -> float:
        return 0.5 * float(p @ self.velocity(p))

    def inv_diagonal(self) -> np.ndarray:
        return self.inv if self.diag else np.diag(self.inv)


class FlatTarget:
    """Uniform density on a box; exercises pure boundary dynamics."""

    def __init__(self, box: PriorBox):
        self.box = box

    def value_and_grad(self, q):
        return 0.0, np.zeros_like(q)


class GaussianTarget:
    """Multivariate normal log-density (possibly truncated by the box)."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=np.float64)
        cov = np.asarray(cov, dtype=np.float64)
        if cov.ndim == 1:
            cov = np.diag(cov)
        self.precision = np.linalg.inv(cov)

    def value_and_grad(self, q):
        d = q - self.mean
        g = -self.precision @ d
        return 0.5 * float(d @ g), g


class PhiPosteriorTarget:
    """log p(params | eps) up to a constant: Gaussian likelihood plus the
    flat box prior (constant inside, enforced by reflection)."""

    def __init__(self, eps: Field | SpectralPower, box: PriorBox,
                 spectrum: PowerSpectrum = POWER_LAW):
        self.power = eps if isinstance(eps, SpectralPower) else SpectralPower.of(eps)
        self.box = box
        self.spectrum = spectrum

    def value_and_grad(self, q):
        params = NoiseParams.from_vector(q)
        return log_likelihood_and_grad(self.power, params, self.spectrum)


def _fold(q, p, box: PriorBox, mass: MassMatrix):
    """Reflect a position into the box, negating the velocity component of
    every coordinate that crossed an odd number of faces.

    The fold is exact for any number of elastic bounces: positions are
    periodic with period twice the width, and the crossing parity fixes the
    momentum sign. Reflection preserves the kinetic energy.
    """
    lower, upper = box.lower, box.upper
    width = box.widths
    rel = q - lower
    period = 2.0 * width
    r = np.mod(rel, period)
    folded = np.where(r <= width, r, period - r)
    parity_odd = np.floor_divide(rel, width).astype(np.int64) % 2 != 0
    q_new = lower + folded
    if np.any(parity_odd):
        if mass.diag:
            p = np.where(parity_odd, -p, p)
        else:
            p = p.copy()
            inv = mass.inv
            for i in np.nonzero(parity_odd)[0]:
                # Elastic collision against face i in the M^{-1} metric.
                p -= 2.0 * (inv[i] @ p) / inv[i, i] * np.eye(mass.dim)[i]
        return q_new, p, int(parity_odd.sum())
    return q_new, p, 0


def leapfrog_reflective(q, p, grad_fn, n_steps: int, step_size: float,
                        mass: MassMatrix, box: PriorBox):
    """Leapfrog integration with elastic collisions at the box faces.

    Returns (q, p, grad at q, n_reflections) or raises FloatingPointError on
    a non-finite gradient (callers flag the proposal as divergent).
    """
    q = np.asarray(q, dtype=np.float64).copy()
    p = np.asarray(p, dtype=np.float64).copy()
    _, g = grad_fn(q)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient at start of trajectory")
    reflections = 0
    p = p + 0.5 * step_size * g
    for i in range(n_steps):
        q = q + step_size * mass.velocity(p)
        q, p, n_ref = _fold(q, p, box, mass)
        reflections += n_ref
        _, g = grad_fn(q)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient mid-trajectory")
        p = p + (step_size if i < n_steps - 1 else 0.5 * step_size) * g
    return q, p, g, reflections


@dataclass
class HmcStepInfo:
    accepted: bool
    accept_prob: float
    delta_h: float
    divergent: bool
    n_steps: int
    reflections: int


def hmc_step(q, target, step_size: float, mass: MassMatrix, box: PriorBox,
             cfg: HmcConfig, rng: RngStream):
    """One Metropolis-corrected HMC transition with a random step count."""
    p0 = mass.sample_momentum(rng)
    n_steps = int(rng.integers(cfg.steps_min, cfg.steps_max + 1))
    logp0, _ = target.value_and_grad(q)
    h0 = -logp0 + mass.kinetic(p0)
    try:
        q1, p1, _, refl = leapfrog_reflective(q, p0, target.value_and_grad,
                                              n_steps, step_size, mass, box)
        logp1, _ = target.value_and_grad(q1)
        h1 = -logp1 + mass.kinetic(p1)
        delta_h = h1 - h0
    except FloatingPointError:
        return q, HmcStepInfo(False, 0.0, math.inf, True, n_steps, 0)
    if not np.isfinite(delta_h) or abs(delta_h) > cfg.divergence_threshold:
        return q, HmcStepInfo(False, 0.0, float(delta_h), True, n_steps, refl)
    accept_prob = min(1.0, math.exp(-delta_h))
    accepted = bool(rng.uniform() < accept_prob)
    return (q1 if accepted else q), HmcStepInfo(accepted, accept_prob,
                                                float(delta_h), False, n_steps, refl)


class DualAveraging:
    """Nesterov-style step-size adaptation toward a target acceptance rate."""

    def __init__(self, initial_step: float, cfg: HmcConfig):
        self.mu = math.log(10.0 * initial_step)
        self.cfg = cfg
        self.log_step = math.log(initial_step)
        self.log_step_avg = math.log(initial_step)
        self.h_bar = 0.0
        self.m = 0

    # Keeps degenerate targets (e.g. perfectly flat ones, where every
    # proposal is accepted) from driving the step to overflow.
    _LOG_STEP_CAP = 30.0

    def update(self, accept_prob: float) -> float:
        self.m += 1
        cfg = self.cfg
        frac = 1.0 / (self.m + cfg.t0)
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (cfg.target_accept - accept_prob)
        raw = self.mu - math.sqrt(self.m) / cfg.gamma * self.h_bar
        self.log_step = min(max(raw, -self._LOG_STEP_CAP), self._LOG_STEP_CAP)
        eta = self.m ** (-cfg.kappa)
        self.log_step_avg = eta * self.log_step + (1.0 - eta) * self.log_step_avg
        return math.exp(self.log_step)

    def recenter(self, step: float) -> None:
        self.mu = math.log(10.0 * step)

    def finalize(self) -> float:
        return math.exp(self.log_step_avg)


def estimate_inverse_mass(positions, cfg: HmcConfig) -> MassMatrix:
    """Inverse mass from the unbiased covariance of warm-up positions.

    A small diagonal jitter keeps the estimate positive definite; a
    degenerate covariance falls back to its diagonal with a warning.
    """
    positions = np.asarray(positions, dtype=np.float64)
    dim = positions.shape[1]
    if positions.shape[0] < max(4, dim + 1):
        warnings.warn("too few warm-up draws for mass estimation; keeping identity")
        return MassMatrix.identity(dim)
    cov = np.cov(positions, rowvar=False, ddof=1).reshape(dim, dim)
    jitter = 1e-8 * max(np.trace(cov), 1e-300) / dim
    cov = cov + jitter * np.eye(dim)
    try:
        np.linalg.cholesky(cov)
        return MassMatrix(cov)
    except np.linalg.LinAlgError:
        warnings.warn("degenerate warm-up covariance; falling back to its diagonal")
        diag = np.clip(np.diag(cov), jitter, None)
        return MassMatrix(diag)


@dataclass
class HmcTuning:
    step_size: float
    mass: MassMatrix


def adapt(accept_probs, positions, cfg: HmcConfig,
          initial_step: float | None = None):
    """Recompute (step_size, mass) from a recorded warm-up sequence.

    Replays dual averaging over the acceptance statistics and estimates the
    inverse mass from the covariance window (P/4, 3P/4] of the positions.
    """
    accept_probs = np.asarray(accept_probs, dtype=np.float64)
    if accept_probs.size < cfg.warmup_iters:
        raise ValueError("need at least warmup_iters recorded iterations")
    da = DualAveraging(initial_step or cfg.init_step_size, cfg)
    for a in accept_probs:
        da.update(float(a))
    p = cfg.warmup_iters
    window = np.asarray(positions)[p // 4: (3 * p) // 4]
    return da.finalize(), estimate_inverse_mass(window, cfg)


def _bracket_step_size(q, target, mass, box, cfg, rng) -> float:
    """Double/halve the step until one-step acceptance crosses 1/2."""
    step = cfg.init_step_size
    p = mass.sample_momentum(rng)
    logp, _ = target.value_and_grad(q)
    h0 = -logp + mass.kinetic(p)

    def accept_prob(eps):
        try:
            q1, p1, _, _ = leapfrog_reflective(q, p, target.value_and_grad, 1,
                                               eps, mass, box)
        except FloatingPointError:
            return 0.0
        logp1, _ = target.value_and_grad(q1)
        dh = (-logp1 + mass.kinetic(p1)) - h0
        return min(1.0, math.exp(-dh)) if np.isfinite(dh) else 0.0

    direction = 1 if accept_prob(step) > 0.5 else -1
    for _ in range(20):
        nxt = step * (2.0 ** direction)
        a = accept_prob(nxt)
        if (direction == 1 and a <= 0.5) or (direction == -1 and a >= 0.5):
            if direction == -1:
                step = nxt
            break
        step = nxt
    return step


def warmup_adapt(q0, target, box: PriorBox, cfg: HmcConfig, rng: RngStream):
    """Warm-up phase: adapt the step size by dual averaging and estimate the
    mass matrix at iteration floor(3P/4) from the covariance window, then
    freeze both. Returns (q, HmcTuning, warmup positions)."""
    q = np.asarray(q0, dtype=np.float64).copy()
    mass = MassMatrix.identity(q.size)
    step = _bracket_step_size(q, target, mass, box, cfg, rng)
    da = DualAveraging(step, cfg)
    positions = np.empty((cfg.warmup_iters, q.size))
    p_iters = cfg.warmup_iters
    mass_update_at = (3 * p_iters) // 4
    for m in range(1, p_iters + 1):
        q, info = hmc_step(q, target, step, mass, box, cfg, rng)
        positions[m - 1] = q
        step = da.update(info.accept_prob)
        if m == mass_update_at and p_iters >= 8:
            window = positions[p_iters // 4: mass_update_at]
            mass = estimate_inverse_mass(window, cfg)
            # New metric changes the step scale; recenter the averaging.
            step = _bracket_step_size(q, target, mass, box, cfg, rng)
            da = DualAveraging(step, cfg)
    return q, HmcTuning(da.finalize(), mass), positions


def sample_target(target, q0, box: PriorBox, n_samples: int, cfg: HmcConfig,
                  rng: RngStream, tuning: HmcTuning | None = None):
    """Generic HMC driver: optional warm-up, then n_samples draws.

    Returns (trace array, step infos, tuning). Each retained draw is the
    state after `transitions_per_sample` accepted-or-rejected transitions.
    """
    q = np.asarray(q0, dtype=np.float64).copy()
    if not box.contains(q):
        raise ValueError("initial position outside the prior box")
    if tuning is None:
        q, tuning, _ = warmup_adapt(q, target, box, cfg, rng)
    trace = np.empty((n_samples, q.size))
    infos = []
    for i in range(n_samples):
        for _ in range(cfg.transitions_per_sample):
            q, info = hmc_step(q, target, tuning.step_size, tuning.mass, box,
                               cfg, rng)
            infos.append(info)
        trace[i] = q
    if not np.all(np.isfinite(trace)):
        raise FloatingPointError("non-finite HMC trace")
    return trace, infos, tuning


def run_hmc(eps: Field | SpectralPower, params_init: NoiseParams, prior: PriorBox,
            n_samples: int, cfg: HmcConfig, rng: RngStream,
            tuning: HmcTuning | None = None,
            spectrum: PowerSpectrum = POWER_LAW, target=None):
    """Sample the noise-parameter posterior given a residual field.

    Warm-up runs only when no tuning is supplied (in the Gibbs loop that is
    the first iteration); afterwards the tuned step and mass are frozen.
    """
    if target is None:
        target = PhiPosteriorTarget(eps, prior, spectrum)
    q0 = params_init.as_vector()
    trace, infos, tuning = sample_target(target, q0, prior, n_samples, cfg,
                                         rng, tuning)
    return trace, infos, tuning

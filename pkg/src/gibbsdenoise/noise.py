"""Parametric stationary Gaussian noise: spectra, sampling, and the exact
Fourier-diagonal log-likelihood with analytic gradients used by HMC.

The covariance family is sigma^2 * F^H D F with F the unitary DFT and D the
evaluation of a power spectrum S on the integer frequency grid. Everything
in this module is stateless; RNG is passed in explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .field import Field, RngStream, _fft, _ifft_real

__all__ = [
    "NoiseParams",
    "PriorBox",
    "PowerSpectrum",
    "POWER_LAW",
    "mode_radii",
    "spectrum_eval",
    "sample_noise",
    "log_likelihood",
    "grad_log_likelihood",
    "normalized_covariance_sqrt_apply",
    "SpectralPower",
]

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class NoiseParams:
    """Noise parameters: overall amplitude sigma plus spectral parameters."""

    sigma: float
    spectral: np.ndarray

    def __init__(self, sigma: float, spectral=()):
        sigma = float(sigma)
        if not (np.isfinite(sigma) and sigma > 0):
            raise ValueError(f"sigma must be positive and finite, got {sigma}")
        spectral = np.atleast_1d(np.asarray(spectral, dtype=np.float64))
        if not np.all(np.isfinite(spectral)):
            raise ValueError("spectral parameters must be finite")
        spectral = spectral.copy()
        spectral.setflags(write=False)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "spectral", spectral)

    def as_vector(self) -> np.ndarray:
        return np.concatenate(([self.sigma], self.spectral))

    @staticmethod
    def from_vector(vec) -> "NoiseParams":
        vec = np.asarray(vec, dtype=np.float64)
        return NoiseParams(vec[0], vec[1:])


@dataclass(frozen=True)
class PriorBox:
    """Uniform box prior over the (sigma, spectral...) vector."""

    lower: np.ndarray
    upper: np.ndarray

    def __init__(self, lower, upper):
        lower = np.atleast_1d(np.asarray(lower, dtype=np.float64)).copy()
        upper = np.atleast_1d(np.asarray(upper, dtype=np.float64)).copy()
        if lower.shape != upper.shape:
            raise ValueError("lower/upper shape mismatch")
        if not np.all(lower < upper):
            raise ValueError("prior box requires lower < upper componentwise")
        if lower[0] <= 0:
            raise ValueError("sigma lower bound must be strictly positive")
        lower.setflags(write=False)
        upper.setflags(write=False)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, vec, margin: float = 0.0) -> bool:
        vec = np.asarray(vec, dtype=np.float64)
        return bool(
            np.all(vec >= self.lower + margin) and np.all(vec <= self.upper - margin)
        )

    def project(self, vec) -> np.ndarray:
        return np.clip(np.asarray(vec, dtype=np.float64), self.lower, self.upper)

    def sample(self, rng: RngStream) -> NoiseParams:
        vec = rng.uniform(self.lower, self.upper)
        return NoiseParams.from_vector(vec)

    def log_density(self, vec) -> float:
        if not self.contains(vec):
            return -np.inf
        return -float(np.log(self.widths).sum())


def mode_radii(dims) -> np.ndarray:
    """Euclidean norm |k| of the integer frequency vector at each grid mode.

    Frequencies follow the standard DFT layout k in [-N/2, N/2) per axis.
    """
    axes = [np.fft.fftfreq(n, d=1.0 / n) for n in dims]
    if len(axes) == 1:
        return np.abs(axes[0])
    kx, ky = np.meshgrid(axes[0], axes[1], indexing="ij")
    return np.hypot(kx, ky)


class PowerSpectrum:
    """Power spectrum family: power law S(k) = |k|^phi, or tabulated values.

    The tabulated family interpolates log S linearly in |k| between node
    radii, with the spectral parameter vector holding log S at the nodes;
    it stands in for covariance families whose spectra come from outside.
    """

    def __init__(self, family: str, node_radii=None):
        if family not in ("power_law", "tabulated"):
            raise ValueError(f"unknown spectrum family {family!r}")
        if family == "tabulated":
            node_radii = np.asarray(node_radii, dtype=np.float64)
            if node_radii.ndim != 1 or node_radii.size < 2:
                raise ValueError("tabulated family needs >= 2 node radii")
            if not np.all(np.diff(node_radii) > 0) or node_radii[0] < 0:
                raise ValueError("node radii must be nonnegative and increasing")
        self.family = family
        self.node_radii = node_radii

    @property
    def n_spectral(self) -> int | None:
        return 1 if self.family == "power_law" else self.node_radii.size

    def evaluate(self, spectral, dims) -> np.ndarray:
        """S at every grid mode; strictly positive, S(0) = 1 for power laws."""
        s, _ = self._eval(np.atleast_1d(spectral), dims, want_grad=False)
        return s

    def evaluate_batch(self, spectral_batch, dims) -> np.ndarray:
        """S for a batch of parameter vectors, shape (n, *dims)."""
        theta = np.atleast_2d(np.asarray(spectral_batch, dtype=np.float64))
        r = mode_radii(dims)
        if self.family == "power_law":
            if theta.shape[1] == 0:
                return np.ones((theta.shape[0],) + r.shape)
            safe_r = np.where(r > 0, r, 1.0)
            expand = (slice(None),) + (None,) * r.ndim
            return safe_r[None, ...] ** theta[:, 0][expand]
        return np.stack([self.evaluate(row, dims) for row in theta])

    def evaluate_with_grad(self, spectral, dims):
        """(S, dS/dspectral) with the gradient stacked on a leading axis."""
        return self._eval(np.atleast_1d(spectral), dims, want_grad=True)

    def _eval(self, spectral, dims, want_grad):
        r = mode_radii(dims)
        if self.family == "power_law":
            if spectral.size == 0:
                # No spectral parameters pins the family at white noise.
                s = np.ones_like(r)
                return s, np.zeros((0,) + r.shape) if want_grad else None
            phi = float(spectral[0])
            if not np.isfinite(phi):
                raise ValueError("non-finite spectral index")
            safe_r = np.where(r > 0, r, 1.0)
            s = safe_r**phi
            if not want_grad:
                return s, None
            # dS/dphi = ln|k| |k|^phi, zero at k=0 where S is pinned to 1
            grad = (np.log(safe_r) * s)[None, ...]
            return s, grad
        log_nodes = np.asarray(spectral, dtype=np.float64)
        if log_nodes.size != self.node_radii.size:
            raise ValueError("spectral vector length must match node count")
        rc = np.clip(r, self.node_radii[0], self.node_radii[-1])
        idx = np.clip(np.searchsorted(self.node_radii, rc, side="right") - 1, 0,
                      self.node_radii.size - 2)
        left, width = self.node_radii[idx], np.diff(self.node_radii)[idx]
        w = (rc - left) / width
        log_s = (1.0 - w) * log_nodes[idx] + w * log_nodes[idx + 1]
        s = np.exp(log_s)
        if not want_grad:
            return s, None
        grad = np.zeros((log_nodes.size,) + r.shape)
        flat = grad.reshape(log_nodes.size, -1)
        ar = np.arange(r.size)
        flat[idx.ravel(), ar] += ((1.0 - w) * s).ravel()
        flat[(idx + 1).ravel(), ar] += (w * s).ravel()
        return s, grad


POWER_LAW = PowerSpectrum("power_law")


def spectrum_eval(params: NoiseParams, dims, spectrum: PowerSpectrum = POWER_LAW) -> np.ndarray:
    """Evaluate the unit-amplitude power spectrum S on the grid modes."""
    return spectrum.evaluate(params.spectral, dims)


def sample_noise(params: NoiseParams, dims, rng: RngStream,
                 spectrum: PowerSpectrum = POWER_LAW) -> Field:
    """Draw a zero-mean Gaussian field with covariance sigma^2 F^H D F.

    Samples a real white field and colors it spectrally, which realizes the
    covariance exactly without any Hermitian-pair bookkeeping.
    """
    s = spectrum.evaluate(params.spectral, dims)
    white = rng.standard_normal(tuple(dims))
    colored = _ifft_real(np.sqrt(s) * _fft(white))
    return Field(params.sigma * colored)


@dataclass(frozen=True)
class SpectralPower:
    """Cached |DFT(eps)|^2 of a residual, reused across likelihood evals.

    One HMC trajectory evaluates the likelihood at many parameter values for
    the same eps; the transform is done once here.
    """

    dims: tuple[int, ...]
    power: np.ndarray

    @staticmethod
    def of(eps: Field) -> "SpectralPower":
        coeffs = _fft(eps.data)
        return SpectralPower(eps.dims, np.abs(coeffs) ** 2)

    @property
    def size(self) -> int:
        return int(self.power.size)


def _require_in_box(params: NoiseParams, box: PriorBox | None) -> None:
    if box is not None and not box.contains(params.as_vector()):
        raise ValueError("noise parameters outside the prior box")


def log_likelihood(eps: Field | SpectralPower, params: NoiseParams,
                   spectrum: PowerSpectrum = POWER_LAW,
                   box: PriorBox | None = None) -> float:
    """Exact Gaussian log-likelihood of a residual under the noise model.

    Fourier-diagonal form: -1/2 sum_k [log(sigma^2 S_k) + |eps_hat_k|^2 /
    (sigma^2 S_k)] - (d/2) log(2 pi). The full normalizer is included so
    values are comparable across sigma.
    """
    _require_in_box(params, box)
    sp = eps if isinstance(eps, SpectralPower) else SpectralPower.of(eps)
    s = spectrum.evaluate(params.spectral, sp.dims)
    var = params.sigma**2 * s
    d = sp.size
    val = -0.5 * float(np.log(var).sum()) - 0.5 * float((sp.power / var).sum()) - 0.5 * d * LOG_2PI
    if not np.isfinite(val):
        raise FloatingPointError("non-finite log-likelihood")
    return val


def grad_log_likelihood(eps: Field | SpectralPower, params: NoiseParams,
                        spectrum: PowerSpectrum = POWER_LAW,
                        box: PriorBox | None = None) -> np.ndarray:
    """Analytic gradient of `log_likelihood` over (sigma, spectral...).

    With v = sigma^2 S: dL/dtheta = 1/2 sum_k (|eps_hat|^2 / v - 1) *
    (dv/dtheta) / v, specialized per parameter.
    """
    _require_in_box(params, box)
    sp = eps if isinstance(eps, SpectralPower) else SpectralPower.of(eps)
    s, ds = spectrum.evaluate_with_grad(params.spectral, sp.dims)
    var = params.sigma**2 * s
    excess = sp.power / var - 1.0
    g_sigma = float((excess / params.sigma).sum())
    g_spec = 0.5 * np.array([float((excess * dsj / s).sum()) for dsj in ds])
    return np.concatenate(([g_sigma], g_spec))


def log_likelihood_and_grad(eps: Field | SpectralPower, params: NoiseParams,
                            spectrum: PowerSpectrum = POWER_LAW,
                            box: PriorBox | None = None):
    """Value and gradient in one pass (the HMC hot path)."""
    _require_in_box(params, box)
    sp = eps if isinstance(eps, SpectralPower) else SpectralPower.of(eps)
    s, ds = spectrum.evaluate_with_grad(params.spectral, sp.dims)
    var = params.sigma**2 * s
    ratio = sp.power / var
    d = sp.size
    val = -0.5 * float(np.log(var).sum()) - 0.5 * float(ratio.sum()) - 0.5 * d * LOG_2PI
    excess = ratio - 1.0
    g_sigma = float((excess / params.sigma).sum())
    g_spec = 0.5 * np.array([float((excess * dsj / s).sum()) for dsj in ds])
    return val, np.concatenate(([g_sigma], g_spec))


def normalized_covariance_sqrt_apply(spectral, f: Field,
                                     spectrum: PowerSpectrum = POWER_LAW,
                                     power: float = 0.5) -> Field:
    """Apply (F^H D F)^power with D the unit-amplitude spectrum (sigma stripped).

    power=0.5 is the coloring operator of the diffusion term; applying it
    twice composes to the full covariance apply.
    """
    s = spectrum.evaluate(np.atleast_1d(spectral), f.dims)
    return Field(_ifft_real(s**power * _fft(f.data)))


def _colored_noise_array(spectral, dims, rng: RngStream,
                         spectrum: PowerSpectrum = POWER_LAW) -> np.ndarray:
    # Unit-amplitude colored draw on raw arrays; reverse-sampler inner loop.
    s = spectrum.evaluate(np.atleast_1d(spectral), dims)
    return _ifft_real(np.sqrt(s) * _fft(rng.standard_normal(tuple(dims))))

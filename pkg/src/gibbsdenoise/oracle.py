"""Ground-truth machines for testing the engine: closed-form linear-Gaussian
posteriors, exhaustive grid posteriors over the noise parameters, a dense
covariance likelihood, and exact discrete Gibbs stationary distributions.

These exist for correctness, not performance; the dense paths are capped at
small sizes on purpose.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .field import Field, _fft, _ifft_real
from .noise import (LOG_2PI, NoiseParams, PowerSpectrum, POWER_LAW, PriorBox,
                    mode_radii)

__all__ = [
    "LinearGaussianProblem",
    "wiener_posterior",
    "sample_wiener_posterior",
    "sample_stationary_field",
    "sample_from_grid",
    "PhiGridPosterior",
    "phi_grid_posterior",
    "dense_covariance",
    "dense_gaussian_logpdf",
    "gibbs_transition_matrix",
    "discrete_gibbs_stationary",
    "compatible_conditional",
]

DENSE_DIM_CAP = 256


@dataclass
class LinearGaussianProblem:
    """Observation y = x + eps with a stationary Gaussian prior on x.

    `prior_spectrum` holds the per-mode prior power P(k) (strictly positive)
    and the noise is the engine's sigma^2 S(k) family.
    """

    prior_mean: Field
    prior_spectrum: np.ndarray
    y: Field
    spectrum: PowerSpectrum = POWER_LAW

    def __post_init__(self):
        self.prior_spectrum = np.asarray(self.prior_spectrum,
                                         dtype=np.float64).reshape(self.prior_mean.dims)
        if np.any(self.prior_spectrum <= 0):
            raise ValueError("prior spectrum must be strictly positive")
        if self.y.dims != self.prior_mean.dims:
            raise ValueError("observation dims mismatch")


def wiener_posterior(problem: LinearGaussianProblem, params: NoiseParams):
    """Exact per-mode posterior of x given y and the noise parameters.

    Returns (mean Field, per-mode variance array): mean_hat = mu_hat +
    P (y_hat - mu_hat) / (P + sigma^2 S), var = P sigma^2 S / (P + sigma^2 S).
    """
    p = problem.prior_spectrum
    s = problem.spectrum.evaluate(params.spectral, problem.y.dims)
    noise_power = params.sigma**2 * s
    mu_hat = _fft(problem.prior_mean.data)
    y_hat = _fft(problem.y.data)
    gain = p / (p + noise_power)
    mean_hat = mu_hat + gain * (y_hat - mu_hat)
    var = p * noise_power / (p + noise_power)
    return Field(_ifft_real(mean_hat)), var


def sample_wiener_posterior(problem: LinearGaussianProblem, params: NoiseParams,
                            rng) -> Field:
    """Exact draw from the Wiener posterior (colored perturbation of the mean)."""
    mean, var = wiener_posterior(problem, params)
    white = rng.standard_normal(problem.y.dims)
    return Field(mean.data + _ifft_real(np.sqrt(var) * _fft(white)))


def sample_stationary_field(prior_mean: Field, prior_spectrum, rng) -> Field:
    """Exact draw from a stationary Gaussian prior with per-mode power P(k)."""
    p = np.asarray(prior_spectrum, dtype=np.float64).reshape(prior_mean.dims)
    white = rng.standard_normal(prior_mean.dims)
    return Field(prior_mean.data + _ifft_real(np.sqrt(p) * _fft(white)))


@dataclass
class PhiGridPosterior:
    """Normalized posterior table over a rectangular parameter grid."""

    axes: list                 # per-parameter 1D grids
    log_posterior: np.ndarray  # shape (len(axis0), len(axis1), ...)
    posterior: np.ndarray

    def marginal(self, j: int) -> np.ndarray:
        other = tuple(i for i in range(self.posterior.ndim) if i != j)
        m = self.posterior.sum(axis=other)
        return m / m.sum()

    def mode(self) -> np.ndarray:
        idx = np.unravel_index(np.argmax(self.posterior), self.posterior.shape)
        return np.array([ax[i] for ax, i in zip(self.axes, idx)])

    def export_csv(self, path, param_names=None) -> None:
        names = param_names or [f"param_{j}" for j in range(len(self.axes))]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["parameter", "value", "marginal_probability"])
            for name, ax, j in zip(names, self.axes, range(len(self.axes))):
                for v, p in zip(ax, self.marginal(j)):
                    writer.writerow([name, repr(float(v)), repr(float(p))])


def phi_grid_posterior(problem: LinearGaussianProblem, prior: PriorBox,
                       grid_resolution: int = 64) -> PhiGridPosterior:
    """Exhaustive posterior over the noise parameters on a uniform grid.

    The marginal likelihood is per-mode Gaussian with power P + sigma^2 S,
    evaluated in Fourier space; log-sum-exp normalization keeps hundreds of
    log-units of dynamic range honest. Cell centers are used, so the table
    integrates to one by construction.
    """
    if grid_resolution < 1:
        raise ValueError("grid resolution must be positive")
    axes = [np.linspace(lo, hi, grid_resolution + 1)[:-1]
            + 0.5 * (hi - lo) / grid_resolution
            for lo, hi in zip(prior.lower, prior.upper)]
    if prior.dim == 1:
        axes_grids = [axes[0]]
    else:
        axes_grids = axes
    p = problem.prior_spectrum.ravel()
    mu_hat = _fft(problem.prior_mean.data).ravel()
    y_hat = _fft(problem.y.data).ravel()
    resid2 = np.abs(y_hat - mu_hat) ** 2

    shape = tuple(len(ax) for ax in axes_grids)
    log_post = np.empty(shape)
    spectral_grids = np.meshgrid(*axes_grids[1:], indexing="ij") if prior.dim > 1 else []
    sigmas = axes_grids[0]
    # Iterate the spectral cells; vectorize over sigma and modes inside.
    spec_shape = shape[1:] if prior.dim > 1 else ()
    for spec_idx in np.ndindex(spec_shape) if spec_shape else [()]:
        spectral = np.array([g[spec_idx] for g in spectral_grids])
        s = problem.spectrum.evaluate(spectral, problem.y.dims).ravel() \
            if prior.dim > 1 else problem.spectrum.evaluate([], problem.y.dims).ravel()
        total = p[None, :] + (sigmas[:, None] ** 2) * s[None, :]
        ll = (-0.5 * np.log(total) - 0.5 * resid2[None, :] / total).sum(axis=1)
        ll -= 0.5 * p.size * LOG_2PI
        log_post[(slice(None),) + spec_idx] = ll
    log_post += prior.log_density(prior.lower + 0.5 * prior.widths)
    flat = log_post.ravel()
    norm = flat.max() + np.log(np.exp(flat - flat.max()).sum())
    log_post = log_post - norm
    return PhiGridPosterior(axes_grids, log_post, np.exp(log_post))


def sample_from_grid(grid: PhiGridPosterior, n_draws: int, rng) -> np.ndarray:
    """Draws from a grid posterior: sample cells by mass, jitter uniformly
    within each cell (the grids are uniform, so cells share one width)."""
    flat = grid.posterior.ravel()
    flat = flat / flat.sum()
    cells = rng.generator.choice(flat.size, size=n_draws, p=flat)
    idx = np.unravel_index(cells, grid.posterior.shape)
    out = np.empty((n_draws, len(grid.axes)))
    for j, ax in enumerate(grid.axes):
        width = ax[1] - ax[0] if ax.size > 1 else 0.0
        out[:, j] = ax[idx[j]] + rng.uniform(-0.5, 0.5, size=n_draws) * width
    return out


def dense_covariance(params: NoiseParams, dims,
                     spectrum: PowerSpectrum = POWER_LAW) -> np.ndarray:
    """Materialize sigma^2 F^H D F as a dense matrix by applying the
    spectral operator to the canonical basis. Capped at small sizes."""
    n = int(np.prod(dims))
    if n > DENSE_DIM_CAP:
        raise ValueError(f"dense covariance capped at {DENSE_DIM_CAP} dims, got {n}")
    s = spectrum.evaluate(params.spectral, dims)
    cov = np.empty((n, n))
    basis = np.zeros(dims)
    flat = basis.reshape(-1)
    for j in range(n):
        flat[j] = 1.0
        cov[:, j] = _ifft_real(s * _fft(basis)).ravel()
        flat[j] = 0.0
    return params.sigma**2 * 0.5 * (cov + cov.T)


def dense_gaussian_logpdf(eps: Field, covariance: np.ndarray) -> float:
    """Cholesky-based exact Gaussian log-density; the slow verification path
    for the Fourier-diagonal likelihood."""
    x = eps.data.ravel()
    n = x.size
    if covariance.shape != (n, n):
        raise ValueError("covariance shape mismatch")
    try:
        chol = np.linalg.cholesky(covariance)
    except np.linalg.LinAlgError as err:
        raise ValueError("covariance is not positive definite") from err
    from scipy.linalg import solve_triangular

    alpha = solve_triangular(chol, x, lower=True)
    logdet = 2.0 * float(np.log(np.diag(chol)).sum())
    return -0.5 * float(alpha @ alpha) - 0.5 * logdet - 0.5 * n * LOG_2PI


def gibbs_transition_matrix(p_cond_phi, q_cond_x) -> np.ndarray:
    """Exact transition matrix of the two-block kernel: from state (phi, x),
    draw phi' from p(phi'|x) then x' from q(x'|phi').

    `p_cond_phi[i, j] = p(phi_i | x_j)` (columns sum to one) and
    `q_cond_x[i, j] = q(x_j | phi_i)` (rows sum to one). States flatten as
    (phi index) * n_x + (x index).
    """
    p_cond_phi = np.asarray(p_cond_phi, dtype=np.float64)
    q_cond_x = np.asarray(q_cond_x, dtype=np.float64)
    n_phi, n_x = q_cond_x.shape
    if p_cond_phi.shape != (n_phi, n_x):
        raise ValueError("conditional table shapes disagree")
    if not (np.allclose(p_cond_phi.sum(axis=0), 1.0, atol=1e-9)
            and np.allclose(q_cond_x.sum(axis=1), 1.0, atol=1e-9)):
        raise ValueError("conditionals must be normalized")
    # T[(phi,x) -> (phi',x')] = p(phi'|x) q(x'|phi'); independent of phi.
    per_x = np.einsum("pj,pk->jpk", p_cond_phi, q_cond_x).reshape(n_x, n_phi * n_x)
    return np.tile(per_x, (n_phi, 1))


def discrete_gibbs_stationary(p_cond_phi, q_cond_x, tol: float = 1e-14,
                              max_iters: int = 200000) -> np.ndarray:
    """Stationary joint table of the two-block Gibbs kernel by power
    iteration to below `tol` residual."""
    p_cond_phi = np.asarray(p_cond_phi, dtype=np.float64)
    q_cond_x = np.asarray(q_cond_x, dtype=np.float64)
    if np.any(p_cond_phi <= 0) or np.any(q_cond_x <= 0):
        raise ValueError("conditionals must be strictly positive (irreducible chain)")
    n_phi, n_x = q_cond_x.shape
    t_mat = gibbs_transition_matrix(p_cond_phi, q_cond_x)
    v = np.full(n_phi * n_x, 1.0 / (n_phi * n_x))
    for _ in range(max_iters):
        v_next = v @ t_mat
        v_next /= v_next.sum()
        if np.abs(v_next - v).max() < tol:
            return v_next.reshape(n_phi, n_x)
        v = v_next
    raise RuntimeError("power iteration did not converge; chain may be reducible")


def compatible_conditional(p_joint, x_weights) -> np.ndarray:
    """Build a signal conditional q(x|phi) guaranteed compatible with the
    parameter conditional p(phi|x) of `p_joint`.

    Any joint with that parameter conditional has the form p(phi|x) w(x);
    this returns its x-conditional for the given positive weights. With
    w != p(x) the pair is a genuinely perturbed (but compatible) kernel, so
    the stationarity-error formula and the explicit stationary distribution
    must agree.
    """
    p_joint = np.asarray(p_joint, dtype=np.float64)
    w = np.asarray(x_weights, dtype=np.float64)
    if np.any(p_joint <= 0) or np.any(w <= 0):
        raise ValueError("need strictly positive tables")
    w = w / w.sum()
    p_phi_given_x = p_joint / p_joint.sum(axis=0, keepdims=True)
    pi = p_phi_given_x * w[None, :]
    return pi / pi.sum(axis=1, keepdims=True)

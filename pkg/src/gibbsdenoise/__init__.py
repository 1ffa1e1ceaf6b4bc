"""Blind denoising of signals with parametric stationary Gaussian noise.

A Gibbs sampler alternates diffusion-based draws of the clean signal
conditioned on the noise parameters with HMC draws of the noise parameters
conditioned on the residual, yielding joint posterior samples of both. The
package ships the full validation stack: convergence diagnostics, rank
calibration, and closed-form oracles for every sampling component.
"""

__version__ = "0.1.0"

from .field import (Field, RngStream, SpectralField, dft, idft, load_field,
                    save_field)
from .noise import (NoiseParams, PowerSpectrum, POWER_LAW, PriorBox,
                    grad_log_likelihood, log_likelihood,
                    normalized_covariance_sqrt_apply, sample_noise,
                    spectrum_eval)
from .schedule import (DiffusionSchedule, forward_marginal_sample, max_sigma,
                       noise_to_time, schedule_eval)
from .score import (AffineSpectralPredictor, GaussianPriorPredictor,
                    NoisePredictor, TrainConfig, train_affine)
from .sampler import (ReverseRunConfig, posterior_mean_estimate,
                      sample_conditional)
from .hmc import HmcConfig, run_hmc
from .gibbs import (ChainTrace, GibbsConfig, gibbs_run, init_sigma_regression,
                    init_spectral_moment)
from .diagnostics import (DiagnosticsReport, ess, kl_at_stationarity_discrete,
                          r_hat, sbc)
from .metrics import power_spectrum, psnr, ssim
from .oracle import (LinearGaussianProblem, dense_gaussian_logpdf,
                     discrete_gibbs_stationary, phi_grid_posterior,
                     wiener_posterior)

"""Conditional noise predictors for the reverse diffusion process.

A predictor estimates the colored noise eps' = (z_t - a(t) x) / b(t) from a
noised field z_t, the time t, and the spectral parameters conditioning the
noise law. Two implementations:

* `GaussianPriorPredictor`: the exact conditional expectation when the
  signal prior is stationary Gaussian; closed form per Fourier mode. This
  is the oracle-grade predictor used to validate the sampler.
* `AffineSpectralPredictor`: a trainable per-mode affine map with
  piecewise-constant coefficients over (time, |k| shell, spectral) bins.
  For Gaussian data the population optimum lies in this class, which makes
  training verifiable against the closed form.

A deep architecture would slot in as another `NoisePredictor`.
"""

from __future__ import annotations

import json
import os
from abc import ABC, abstractmethod
from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import Field, RngStream, _fft, _ifft_real, load_field, save_field
from .noise import POWER_LAW, PowerSpectrum, mode_radii
from .schedule import DiffusionSchedule, schedule_eval

__all__ = [
    "NoisePredictor",
    "GaussianPriorPredictor",
    "AffineSpectralPredictor",
    "TrainConfig",
    "TrainResult",
    "train_affine",
    "run_epochs",
    "select_step_size",
    "batch_loss_and_grad",
    "save_predictor",
    "load_predictor",
]


class NoisePredictor(ABC):
    """Interface: estimate the colored noise component of a noised field."""

    dims: tuple[int, ...]

    @abstractmethod
    def predict_array(self, z: np.ndarray, t: float, spectral) -> np.ndarray:
        """Array-level prediction; hot path for the reverse sampler."""

    def predict(self, z: Field, t: float, spectral) -> Field:
        if z.dims != tuple(self.dims):
            raise ValueError(f"dims mismatch: field {z.dims} vs predictor {self.dims}")
        out = self.predict_array(z.data, float(t), np.atleast_1d(spectral))
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite prediction")
        return Field(out)


class GaussianPriorPredictor(NoisePredictor):
    """Exact E[eps' | z_t] for a stationary Gaussian signal prior.

    Per mode k with prior power P(k) and noise power S(k):
    E[eps' | z]^(k) = b S (z_hat - a mu_hat) / (a^2 P + b^2 S).
    """

    def __init__(self, prior_mean: Field, prior_spectrum, schedule: DiffusionSchedule,
                 spectrum: PowerSpectrum = POWER_LAW):
        self.dims = prior_mean.dims
        self.prior_mean = prior_mean
        self.prior_spectrum = np.asarray(prior_spectrum, dtype=np.float64).reshape(self.dims)
        if np.any(self.prior_spectrum < 0):
            raise ValueError("prior spectrum must be nonnegative")
        self.schedule = schedule
        self.spectrum = spectrum
        self._mean_hat = _fft(prior_mean.data)

    def predict_array(self, z, t, spectral):
        if not 0.0 < t <= 1.0:
            raise ValueError(f"Gaussian predictor needs t in (0, 1], got {t}")
        a, b, _, _ = schedule_eval(self.schedule, t)
        s = self.spectrum.evaluate(spectral, self.dims)
        z_hat = _fft(z)
        num = b * s * (z_hat - a * self._mean_hat)
        den = a * a * self.prior_spectrum + b * b * s
        return _ifft_real(num / den)


def shell_indices(dims) -> np.ndarray:
    """Integer-radius shell index of every mode (nearest-integer |k|)."""
    return np.rint(mode_radii(dims)).astype(np.intp)


@dataclass
class AffineSpectralPredictor(NoisePredictor):
    """Per-mode affine predictor, piecewise constant over coefficient bins.

    Prediction in coefficient space: gain[bin] * z_hat(k) + bias[bin], with
    bins indexed by (time bin, integer-radius shell, spectral bin). Biases
    are real scalars, which keeps predictions Hermitian-symmetric.
    """

    dims: tuple[int, ...]
    time_edges: np.ndarray
    spectral_edges: np.ndarray
    gains: np.ndarray = None
    biases: np.ndarray = None
    _shells: np.ndarray = dc_field(default=None, repr=False)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.time_edges = np.asarray(self.time_edges, dtype=np.float64)
        self.spectral_edges = np.asarray(self.spectral_edges, dtype=np.float64)
        self._shells = shell_indices(self.dims)
        shape = (self.time_edges.size - 1, self.n_shells, self.spectral_edges.size - 1)
        if self.gains is None:
            self.gains = np.zeros(shape)
        if self.biases is None:
            self.biases = np.zeros(shape)
        if self.gains.shape != shape or self.biases.shape != shape:
            raise ValueError(f"coefficient arrays must have shape {shape}")

    @property
    def n_shells(self) -> int:
        return int(self._shells.max()) + 1

    @staticmethod
    def create(dims, n_time_bins: int = 32, spectral_lo: float = 0.0,
               spectral_hi: float = 0.0, n_spectral_bins: int = 8) -> "AffineSpectralPredictor":
        if spectral_hi <= spectral_lo:
            spectral_edges = np.array([spectral_lo - 0.5, spectral_lo + 0.5])
        else:
            spectral_edges = np.linspace(spectral_lo, spectral_hi, n_spectral_bins + 1)
        return AffineSpectralPredictor(
            dims=tuple(dims),
            time_edges=np.linspace(0.0, 1.0, n_time_bins + 1),
            spectral_edges=spectral_edges,
        )

    def time_bin(self, t: float) -> int:
        i = int(np.searchsorted(self.time_edges, t, side="right")) - 1
        return min(max(i, 0), self.time_edges.size - 2)

    def spectral_bin(self, spectral) -> int:
        v = float(np.atleast_1d(spectral)[0]) if np.size(spectral) else 0.0
        i = int(np.searchsorted(self.spectral_edges, v, side="right")) - 1
        return min(max(i, 0), self.spectral_edges.size - 2)

    def predict_array(self, z, t, spectral):
        tb, sb = self.time_bin(t), self.spectral_bin(spectral)
        gain = self.gains[tb, self._shells, sb]
        bias = self.biases[tb, self._shells, sb]
        return _ifft_real(gain * _fft(z) + bias)


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    epochs: int = 10
    draws_per_epoch: int = 2000
    batch_size: int = 64
    step_size: float | None = None      # None: pick from step_grid on held-out loss
    step_grid: tuple = (0.05, 0.2, 0.8)
    momentum: float = 0.0
    holdout_draws: int = 256
    # > 0 averages the coefficient snapshots of the last K epochs (Polyak
    # tail averaging), which removes constant-step SGD jitter around the
    # optimum without changing the optimizer's trajectory.
    tail_average_epochs: int = 0


@dataclass
class TrainResult:
    predictor: AffineSpectralPredictor
    epoch_losses: list
    step_size: float


def _flat_bins(pred: AffineSpectralPredictor, t_bins, s_bins):
    # Combined bin index per (draw, mode); shape (B, *dims).
    n_sh, n_sb = pred.n_shells, pred.spectral_edges.size - 1
    return ((t_bins[:, None] * n_sh + pred._shells.ravel()[None, :]) * n_sb
            + s_bins[:, None]).reshape((t_bins.size,) + pred.dims)


def batch_loss_and_grad(pred: AffineSpectralPredictor, z_hat, target_hat, t_bins, s_bins):
    """Mean per-draw loss sum_k |gain z_hat + bias - target_hat|^2 and its
    gradient with respect to the (gains, biases) arrays."""
    n_draws = z_hat.shape[0]
    flat = _flat_bins(pred, t_bins, s_bins).ravel()
    size = pred.gains.size
    gain_flat = pred.gains.ravel()[flat]
    bias_flat = pred.biases.ravel()[flat]
    resid = gain_flat * z_hat.ravel() + bias_flat - target_hat.ravel()
    loss = float(np.vdot(resid, resid).real) / n_draws
    gg = 2.0 * np.bincount(flat, weights=(resid * np.conj(z_hat.ravel())).real,
                           minlength=size) / n_draws
    gb = 2.0 * np.bincount(flat, weights=resid.real, minlength=size) / n_draws
    return loss, gg.reshape(pred.gains.shape), gb.reshape(pred.gains.shape)


def _synthesize(pred, dataset_hats, schedule, spec_lo, spec_hi, spectrum, n, rng):
    """Draw a training batch directly in coefficient space (fully batched)."""
    dims = pred.dims
    axes = tuple(range(1, len(dims) + 1))
    idx = rng.integers(0, len(dataset_hats), size=n)
    t_idx = rng.integers(1, schedule.n_steps + 1, size=n)
    spec = rng.uniform(spec_lo, spec_hi, size=(n, np.size(spec_lo)))
    expand = (slice(None),) + (None,) * len(dims)
    a = np.sqrt(schedule.alpha_bars[t_idx])[expand]
    b = np.sqrt(1.0 - schedule.alpha_bars[t_idx])[expand]
    s = spectrum.evaluate_batch(spec, dims)
    white = rng.standard_normal((n,) + dims)
    target = np.sqrt(s) * np.fft.fftn(white, axes=axes, norm="ortho")
    z_hat = a * np.asarray(dataset_hats)[idx] + b * target
    t_bins = np.minimum(
        np.searchsorted(pred.time_edges, schedule.grid[t_idx], side="right") - 1,
        pred.time_edges.size - 2)
    s_col = spec[:, 0] if spec.shape[1] else np.zeros(n)
    s_bins = np.clip(np.searchsorted(pred.spectral_edges, s_col, side="right") - 1,
                     0, pred.spectral_edges.size - 2)
    return z_hat, target, t_bins.astype(np.intp), s_bins.astype(np.intp)


def run_epochs(pred, dataset_hats, schedule, spec_lo, spec_hi, spectrum, cfg,
               step, rng, epochs, velocity=None, epoch_offset=0):
    """SGD over synthesized batches for a given number of epochs.

    Per-epoch RNG substreams are keyed by the global epoch number, so a run
    resumed from a checkpoint continues exactly like an unsplit run.
    Returns (per-epoch losses, momentum velocity state).
    """
    dataset_hats = np.asarray(dataset_hats)
    vel_g = np.zeros_like(pred.gains) if velocity is None else velocity[0]
    vel_b = np.zeros_like(pred.biases) if velocity is None else velocity[1]
    losses = []
    counts = np.maximum(np.bincount(pred._shells.ravel(),
                                    minlength=pred.n_shells).astype(float), 1.0)
    # Normalize per-bin gradients by expected modes per draw in the shell so
    # one step size works across shells of very different sizes.
    norm = counts[None, :, None]
    snapshots = []
    for ep in range(epochs):
        ep_rng = rng.child(epoch_offset + ep)
        batch_losses = []
        remaining = cfg.draws_per_epoch
        while remaining > 0:
            n = min(cfg.batch_size, remaining)
            remaining -= n
            z, tgt, tb, sb = _synthesize(pred, dataset_hats, schedule, spec_lo,
                                         spec_hi, spectrum, n, ep_rng)
            loss, gg, gb = batch_loss_and_grad(pred, z, tgt, tb, sb)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at epoch {ep}")
            vel_g = cfg.momentum * vel_g - step * gg / norm
            vel_b = cfg.momentum * vel_b - step * gb / norm
            pred.gains = pred.gains + vel_g
            pred.biases = pred.biases + vel_b
            batch_losses.append(loss)
        losses.append(float(np.mean(batch_losses)))
        if cfg.tail_average_epochs and ep >= epochs - cfg.tail_average_epochs:
            snapshots.append((pred.gains.copy(), pred.biases.copy()))
    if snapshots:
        pred.gains = np.mean([s[0] for s in snapshots], axis=0)
        pred.biases = np.mean([s[1] for s in snapshots], axis=0)
    return losses, (vel_g, vel_b)


def _dataset_hats(pred, dataset):
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    for f in dataset:
        if f.dims != pred.dims:
            raise ValueError("dataset dims mismatch with predictor")
    return np.stack([_fft(f.data) for f in dataset])


def select_step_size(pred: AffineSpectralPredictor, dataset_hats, schedule,
                     spectral_prior, cfg: TrainConfig, rng: RngStream,
                     spectrum: PowerSpectrum = POWER_LAW) -> float:
    """Pick the SGD step from `cfg.step_grid` by held-out loss after one
    probe epoch per candidate (the predictor is not modified)."""
    spec_lo, spec_hi = (np.atleast_1d(np.asarray(v, dtype=np.float64))
                        for v in spectral_prior)
    probe_cfg = TrainConfig(**{**cfg.__dict__, "draws_per_epoch":
                               max(cfg.draws_per_epoch // 4, cfg.batch_size)})
    hz, ht, htb, hsb = _synthesize(pred, dataset_hats, schedule, spec_lo,
                                   spec_hi, spectrum, cfg.holdout_draws,
                                   rng.child(10**6))
    best = None
    for cand in cfg.step_grid:
        trial = AffineSpectralPredictor(pred.dims, pred.time_edges,
                                        pred.spectral_edges,
                                        pred.gains.copy(), pred.biases.copy())
        try:
            run_epochs(trial, dataset_hats, schedule, spec_lo, spec_hi,
                       spectrum, probe_cfg, cand, rng.child(10**6 + 1), 1)
            held, _, _ = batch_loss_and_grad(trial, hz, ht, htb, hsb)
        except FloatingPointError:
            continue
        if np.isfinite(held) and (best is None or held < best[0]):
            best = (held, cand)
    if best is None:
        raise FloatingPointError("all candidate step sizes diverged")
    return best[1]


def train_affine(pred: AffineSpectralPredictor, dataset, schedule: DiffusionSchedule,
                 spectral_prior, cfg: TrainConfig, rng: RngStream,
                 spectrum: PowerSpectrum = POWER_LAW) -> TrainResult:
    """Fit the affine predictor by SGD on the noise-prediction loss.

    `dataset` is a nonempty list of Fields sharing the predictor's dims;
    `spectral_prior` is a (lower, upper) pair over the spectral parameters
    (equal bounds pin them). The per-draw target is the sampled eps' itself,
    so the loss is the standard noise-matching objective with unit weight.
    """
    dataset_hats = _dataset_hats(pred, dataset)
    spec_lo, spec_hi = (np.atleast_1d(np.asarray(v, dtype=np.float64))
                        for v in spectral_prior)
    step = cfg.step_size
    if step is None:
        step = select_step_size(pred, dataset_hats, schedule, spectral_prior,
                                cfg, rng, spectrum)
    losses, _ = run_epochs(pred, dataset_hats, schedule, spec_lo, spec_hi,
                           spectrum, cfg, step, rng, cfg.epochs)
    return TrainResult(pred, losses, step)


# ---------------------------------------------------------------------------
# Serialization: GDTF payloads plus a JSON header.


def save_predictor(pred: AffineSpectralPredictor, directory,
                   schedule: DiffusionSchedule | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    meta = {
        "kind": "affine_spectral",
        "dims": list(pred.dims),
        "time_edges": pred.time_edges.tolist(),
        "spectral_edges": pred.spectral_edges.tolist(),
        "coeff_shape": list(pred.gains.shape),
        "schedule_hash": schedule.hash() if schedule is not None else None,
    }
    with open(os.path.join(directory, "predictor.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    save_field(Field(pred.gains.reshape(-1)), os.path.join(directory, "gains.gdtf"))
    save_field(Field(pred.biases.reshape(-1)), os.path.join(directory, "biases.gdtf"))


def load_predictor(directory) -> AffineSpectralPredictor:
    with open(os.path.join(directory, "predictor.json")) as fh:
        meta = json.load(fh)
    if meta.get("kind") != "affine_spectral":
        raise ValueError(f"unknown predictor kind {meta.get('kind')!r}")
    shape = tuple(meta["coeff_shape"])
    gains = load_field(os.path.join(directory, "gains.gdtf")).data.reshape(shape)
    biases = load_field(os.path.join(directory, "biases.gdtf")).data.reshape(shape)
    return AffineSpectralPredictor(
        dims=tuple(meta["dims"]),
        time_edges=np.asarray(meta["time_edges"]),
        spectral_edges=np.asarray(meta["spectral_edges"]),
        gains=gains.copy(),
        biases=biases.copy(),
    )

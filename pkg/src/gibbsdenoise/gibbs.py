"""The blind-denoising outer loop: alternate diffusion draws of the signal
conditional with HMC draws of the noise parameters, per chain.

Each chain owns an independent RNG substream, so chains are exchangeable,
reproducible under a fixed master seed, and safe to run concurrently. HMC
warm-up happens once, inside the first iteration of each chain; the tuned
step size and mass matrix are frozen afterwards.
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import Field, RngStream
from .hmc import HmcConfig, run_hmc
from .noise import NoiseParams, PriorBox, SpectralPower
from .sampler import ReverseRunConfig, sample_conditional
from .schedule import max_sigma

__all__ = [
    "GibbsConfig",
    "ChainTrace",
    "gibbs_run",
    "SigmaRegressor",
    "init_sigma_regression",
    "init_spectral_moment",
    "save_trace_csv",
    "load_trace_csv",
]


@dataclass
class GibbsConfig:
    iterations: int = 60
    n_chains: int = 4
    warmup_discard: int = 30
    init_strategy: str = "prior"      # prior | sigma_regression | spectral_moment
    thin_x_every: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_discard < self.iterations:
            raise ValueError("need 0 <= warmup_discard < iterations")
        if self.init_strategy not in ("prior", "sigma_regression", "spectral_moment"):
            raise ValueError(f"unknown init strategy {self.init_strategy!r}")


@dataclass
class ChainTrace:
    """Per-iteration record of one Gibbs chain.

    `phis` has a row per iteration k = 0..M (row 0 is the initialization);
    x fields are kept thinned plus the final one. A chain that aborted
    carries its error message and is excluded from pooled statistics.
    """

    chain_id: int
    phis: np.ndarray
    accepts: np.ndarray
    delta_hs: np.ndarray
    wall_ms: np.ndarray
    xs: dict = dc_field(default_factory=dict)
    failed: str | None = None

    @property
    def iterations(self) -> int:
        return self.phis.shape[0] - 1

    def retained_phis(self, warmup_discard: int) -> np.ndarray:
        return self.phis[warmup_discard + 1:]

    def retained_xs(self, warmup_discard: int):
        return [f for k, f in sorted(self.xs.items()) if k > warmup_discard]


def _initial_params(y: Field, prior: PriorBox, strategy, rng: RngStream,
                    sigma_regressor=None) -> NoiseParams:
    if strategy == "prior":
        return prior.sample(rng)
    if strategy == "sigma_regression":
        if sigma_regressor is None:
            warnings.warn("no sigma regressor fitted; falling back to prior draw")
            return prior.sample(rng)
        sigma = sigma_regressor(y)
        vec = prior.sample(rng).as_vector()
        vec[0] = np.clip(sigma, prior.lower[0], prior.upper[0])
        return NoiseParams.from_vector(vec)
    return init_spectral_moment(y, prior)


def gibbs_run(y: Field, cfg: GibbsConfig, reverse_cfg: ReverseRunConfig,
              prior: PriorBox, hmc_cfg: HmcConfig | None = None,
              sigma_regressor=None, rng: RngStream | None = None):
    """Run all chains of the blind-denoising Gibbs sampler on an observation.

    Returns a list of ChainTrace, one per chain, failed chains included
    (marked, with whatever was recorded before the error).
    """
    hmc_cfg = hmc_cfg or HmcConfig()
    rng = rng or RngStream(cfg.seed)
    cap = max_sigma(reverse_cfg.schedule)
    if prior.upper[0] > cap:
        raise ValueError(
            f"prior sigma upper bound {prior.upper[0]:.4g} exceeds schedule "
            f"capacity {cap:.4g}")
    traces = []
    for chain in range(cfg.n_chains):
        traces.append(_run_chain(chain, y, cfg, reverse_cfg, prior, hmc_cfg,
                                 sigma_regressor, rng.child(chain)))
    n_failed = sum(1 for t in traces if t.failed)
    if n_failed:
        warnings.warn(f"{n_failed} of {cfg.n_chains} chains failed")
    return traces


def _run_chain(chain_id, y, cfg, reverse_cfg, prior, hmc_cfg, sigma_regressor,
               rng: RngStream) -> ChainTrace:
    m_iters = cfg.iterations
    k_params = prior.dim
    trace = ChainTrace(
        chain_id=chain_id,
        phis=np.full((m_iters + 1, k_params), np.nan),
        accepts=np.zeros(m_iters + 1),
        delta_hs=np.full(m_iters + 1, np.nan),
        wall_ms=np.zeros(m_iters + 1),
    )
    rng_init, rng_x, rng_phi = rng.child(0), rng.child(1), rng.child(2)
    try:
        params = _initial_params(y, prior, cfg.init_strategy, rng_init,
                                 sigma_regressor)
        trace.phis[0] = params.as_vector()
        t0 = time.perf_counter()
        x = sample_conditional(y, params, reverse_cfg, rng_x)
        trace.wall_ms[0] = (time.perf_counter() - t0) * 1e3
        if cfg.thin_x_every and 0 % cfg.thin_x_every == 0:
            trace.xs[0] = x
        tuning = None
        for k in range(1, m_iters + 1):
            t0 = time.perf_counter()
            eps = y - x
            power = SpectralPower.of(eps)
            phi_trace, infos, tuning = run_hmc(
                power, params, prior, 1, hmc_cfg, rng_phi.child(k),
                tuning=tuning, spectrum=reverse_cfg.spectrum)
            params = NoiseParams.from_vector(phi_trace[-1])
            x = sample_conditional(y, params, reverse_cfg, rng_x)
            trace.phis[k] = params.as_vector()
            trace.accepts[k] = np.mean([i.accepted for i in infos])
            trace.delta_hs[k] = infos[-1].delta_h
            trace.wall_ms[k] = (time.perf_counter() - t0) * 1e3
            if (cfg.thin_x_every and k % cfg.thin_x_every == 0) or k == m_iters:
                trace.xs[k] = x
    except Exception as err:  # noqa: BLE001 - per-chain fault isolation
        trace.failed = f"{type(err).__name__}: {err}"
    return trace


# ---------------------------------------------------------------------------
# Initialization heuristics


def _finest_detail(y: Field) -> np.ndarray:
    """Finest-scale orthonormal Haar detail coefficients (diagonal band in 2D)."""
    d = y.data
    if len(y.dims) == 1:
        n = d.size - d.size % 2
        return (d[0:n:2] - d[1:n:2]) / np.sqrt(2.0)
    h = d.shape[0] - d.shape[0] % 2
    w = d.shape[1] - d.shape[1] % 2
    blk = d[:h, :w]
    return (blk[0::2, 0::2] - blk[0::2, 1::2] - blk[1::2, 0::2] + blk[1::2, 1::2]) / 2.0


def _sigma_features(y: Field) -> np.ndarray:
    detail = _finest_detail(y)
    mad = np.median(np.abs(detail - np.median(detail)))
    return np.array([mad, float(np.std(y.data)), 1.0])


@dataclass
class SigmaRegressor:
    """Linear map from observation features to a noise-amplitude estimate."""

    weights: np.ndarray
    box: PriorBox

    def __call__(self, y: Field) -> float:
        raw = float(_sigma_features(y) @ self.weights)
        return float(np.clip(raw, self.box.lower[0], self.box.upper[0]))


def init_sigma_regression(pairs, box: PriorBox) -> SigmaRegressor | None:
    """Least-squares fit of sigma on held-out (observation, sigma) pairs.

    Features are the MAD of the finest-scale Haar details and the total
    standard deviation. Returns None (with a warning) on a rank-deficient
    design, signalling callers to fall back to prior draws.
    """
    pairs = list(pairs)
    if len(pairs) < 20:
        raise ValueError("need at least 20 held-out pairs")
    design = np.stack([_sigma_features(y) for y, _ in pairs])
    targets = np.array([s for _, s in pairs], dtype=np.float64)
    rank = np.linalg.matrix_rank(design)
    if rank < design.shape[1]:
        warnings.warn("rank-deficient sigma regression design; use prior draws")
        return None
    weights, *_ = np.linalg.lstsq(design, targets, rcond=None)
    return SigmaRegressor(weights, box)


def init_spectral_moment(y: Field, prior: PriorBox) -> NoiseParams:
    """Deterministic moment-style initializer from the periodogram.

    Fits log mean power against log |k| over the top octave of shells, where
    the observation is noise dominated; the slope estimates the spectral
    index and the intercept the amplitude. The result is projected into the
    prior box, so an in-box value is always returned.
    """
    from .metrics import power_spectrum  # local import to avoid a cycle

    est = power_spectrum(y)
    radii, powers = est.bin_centers, est.mean_power
    keep = radii >= radii.max() / 2.0
    if keep.sum() < 2:
        keep = np.ones_like(radii, dtype=bool)
    r, p = radii[keep], np.maximum(powers[keep], 1e-300)
    slope, intercept = np.polyfit(np.log(r), np.log(p), 1)
    sigma = float(np.exp(0.5 * intercept))
    vec = np.concatenate(([sigma], [slope] * (prior.dim - 1)))
    # Interior projection: values exactly on the sigma=lower face would make
    # downstream strict-positivity checks fragile.
    vec = prior.project(vec)
    return NoiseParams.from_vector(vec)


# ---------------------------------------------------------------------------
# Trace serialization (one CSV per chain; see also the run manifest in cli)

TRACE_FIXED_COLS = ["iter", "chain"]
TRACE_TAIL_COLS = ["accept", "delta_H", "wall_ms"]


def trace_columns(k_params: int):
    names = ["sigma"] + [f"spectral_{j}" for j in range(k_params - 1)]
    return TRACE_FIXED_COLS + names + TRACE_TAIL_COLS


def save_trace_csv(trace: ChainTrace, path) -> None:
    k = trace.phis.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(trace_columns(k))
        for it in range(trace.phis.shape[0]):
            row = [it, trace.chain_id]
            row += [repr(float(v)) for v in trace.phis[it]]
            row += [repr(float(trace.accepts[it])),
                    repr(float(trace.delta_hs[it])),
                    repr(float(trace.wall_ms[it]))]
            writer.writerow(row)


def load_trace_csv(path) -> ChainTrace:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != TRACE_FIXED_COLS or len(rows) < 2:
        raise ValueError(f"malformed trace CSV {path}")
    header = rows[0]
    k = len(header) - len(TRACE_FIXED_COLS) - len(TRACE_TAIL_COLS)
    if k < 1:
        raise ValueError(f"trace CSV {path} has no parameter columns")
    body = np.array([[float(v) for v in row] for row in rows[1:]])
    if body.shape[1] != len(header):
        raise ValueError(f"ragged trace CSV {path}")
    return ChainTrace(
        chain_id=int(body[0, 1]),
        phis=body[:, 2:2 + k],
        accepts=body[:, 2 + k],
        delta_hs=body[:, 3 + k],
        wall_ms=body[:, 4 + k],
    )

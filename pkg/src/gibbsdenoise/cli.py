"""Experiment runner: data generation, predictor training, blind denoising,
calibration suites, and plot-ready exports.

One JSON config document describes a run; every command derives all of its
randomness from the single master seed through named substreams, so
re-running any command with a fixed seed reproduces its numeric artifacts
byte for byte (wall-clock timing columns excepted).

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys

import click
import numpy as np

from . import __version__
from .diagnostics import (DiagnosticsReport, convergence_stats, ess,
                          export_rank_histogram_csv, sbc, wasserstein1)
from .field import Field, FieldFormatError, RngStream, load_field, save_field
from .gibbs import (ChainTrace, GibbsConfig, gibbs_run, load_trace_csv,
                    save_trace_csv, trace_columns)
from .hmc import HmcConfig
from .metrics import MetricsRow, append_metrics_row, psnr, ssim
from .noise import NoiseParams, PowerSpectrum, POWER_LAW, PriorBox, sample_noise
from .oracle import (LinearGaussianProblem, phi_grid_posterior, sample_from_grid,
                     sample_stationary_field)
from .sampler import ReverseRunConfig, posterior_mean_estimate
from .schedule import DiffusionSchedule, max_sigma
from .score import (AffineSpectralPredictor, GaussianPriorPredictor, TrainConfig,
                    load_predictor, run_epochs, save_predictor, select_step_size)

__all__ = ["main", "ConfigError", "load_config", "save_config"]

CONFIG_SCHEMA_VERSION = 1

DEFAULT_CONFIG = {
    "schema_version": CONFIG_SCHEMA_VERSION,
    "seed": 0,
    "out_dir": "runs/out",
    "problem": {
        "dims": [32, 32],
        "prior": {"mean": 0.0, "spectrum": {"kind": "white", "amplitude": 1.0}},
        "noise": {"family": "power_law"},
        "prior_box": {"lower": [0.05, -1.0], "upper": [1.0, 1.0]},
    },
    "schedule": {"beta_min": 0.1, "beta_max": 20.0, "n_steps": 1000},
    "predictor": {"kind": "gaussian_prior"},
    "gibbs": {"iterations": 60, "chains": 4, "warmup_discard": 30,
              "init_strategy": "prior", "thin_x_every": 5},
    "hmc": {"target_accept": 0.65, "gamma": 0.05, "t0": 10.0, "kappa": 0.75,
            "warmup_iters": 300, "steps_min": 5, "steps_max": 15},
    "generate": {"n_items": 10},
    "train": {"epochs": 10, "draws_per_epoch": 2000, "batch_size": 64,
              "step_size": None, "momentum": 0.0, "time_bins": 32,
              "spectral_bins": 8, "dataset_dir": None, "resume": None},
    "sbc": {"pipeline": "grid_oracle", "n_runs": 200, "draws_per_run": 19,
            "grid_resolution": 128, "bins": 20, "bias_fraction": 0.0,
            "thinning": None},
    "oracle": {"grid_resolution": 96},
}


class ConfigError(Exception):
    """Configuration problem; maps to exit code 2."""


def canonical_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def save_config(config: dict, path) -> None:
    with open(path, "w") as fh:
        fh.write(canonical_json(config))


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            config = json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from err
    if not isinstance(config, dict):
        raise ConfigError("config root must be a JSON object")
    version = config.get("schema_version")
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {version!r}")
    merged = _merge(DEFAULT_CONFIG, config)
    return merged


def _merge(defaults, override):
    out = dict(defaults)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Component builders


def _dims(config) -> tuple:
    dims = tuple(int(d) for d in config["problem"]["dims"])
    if not dims or len(dims) > 2 or any(d < 1 for d in dims):
        raise ConfigError(f"problem.dims must be a 1D or 2D shape, got {dims}")
    return dims


def _prior_box(config) -> PriorBox:
    box = config["problem"]["prior_box"]
    try:
        return PriorBox(box["lower"], box["upper"])
    except (KeyError, ValueError) as err:
        raise ConfigError(f"bad prior_box: {err}") from err


def _schedule(config) -> DiffusionSchedule:
    s = config["schedule"]
    try:
        return DiffusionSchedule(float(s["beta_min"]), float(s["beta_max"]),
                                 int(s["n_steps"]))
    except (KeyError, ValueError) as err:
        raise ConfigError(f"bad schedule: {err}") from err


def _noise_spectrum(config) -> PowerSpectrum:
    fam = config["problem"]["noise"].get("family", "power_law")
    if fam == "power_law":
        return POWER_LAW
    if fam == "tabulated":
        nodes = config["problem"]["noise"].get("node_radii")
        if not nodes:
            raise ConfigError("tabulated noise family needs node_radii")
        return PowerSpectrum("tabulated", np.asarray(nodes, dtype=float))
    raise ConfigError(f"unknown noise family {fam!r}")


def _prior_field_model(config, dims):
    prior = config["problem"]["prior"]
    mean = Field.full(dims, float(prior.get("mean", 0.0)))
    spec = prior.get("spectrum", {"kind": "white", "amplitude": 1.0})
    amp = float(spec.get("amplitude", 1.0))
    kind = spec.get("kind", "white")
    if kind == "white":
        p = np.full(dims, amp * amp)
    elif kind == "power_law":
        p = amp * amp * POWER_LAW.evaluate([float(spec.get("index", 0.0))], dims)
    else:
        raise ConfigError(f"unknown prior spectrum kind {kind!r}")
    return mean, p


def _predictor(config, dims, schedule):
    spec = config["predictor"]
    kind = spec.get("kind")
    if kind == "gaussian_prior":
        mean, p = _prior_field_model(config, dims)
        return GaussianPriorPredictor(mean, p, schedule, _noise_spectrum(config))
    if kind == "affine_spectral":
        path = spec.get("path")
        if not path or not os.path.exists(os.path.join(path, "predictor.json")):
            raise ConfigError(f"predictor file not found at {path!r}")
        pred = load_predictor(path)
        if pred.dims != dims:
            raise ConfigError(f"predictor dims {pred.dims} do not match problem dims {dims}")
        return pred
    raise ConfigError(f"unknown predictor kind {kind!r}")


def _gibbs_config(config, seed) -> GibbsConfig:
    g = config["gibbs"]
    try:
        return GibbsConfig(iterations=int(g["iterations"]),
                           n_chains=int(g["chains"]),
                           warmup_discard=int(g["warmup_discard"]),
                           init_strategy=str(g["init_strategy"]),
                           thin_x_every=int(g["thin_x_every"]),
                           seed=seed)
    except (KeyError, ValueError) as err:
        raise ConfigError(f"bad gibbs config: {err}") from err


def _hmc_config(config) -> HmcConfig:
    h = config["hmc"]
    try:
        return HmcConfig(target_accept=float(h["target_accept"]),
                         gamma=float(h["gamma"]), t0=float(h["t0"]),
                         kappa=float(h["kappa"]),
                         warmup_iters=int(h["warmup_iters"]),
                         steps_min=int(h["steps_min"]),
                         steps_max=int(h["steps_max"]))
    except (KeyError, ValueError) as err:
        raise ConfigError(f"bad hmc config: {err}") from err


def _write_manifest(out_dir, config, seed, schedule) -> None:
    manifest = {
        "config_hash": config_hash(config),
        "seed": seed,
        "package_version": __version__,
        "schedule_hash": schedule.hash(),
        "schema_version": CONFIG_SCHEMA_VERSION,
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as fh:
        fh.write(canonical_json(manifest))


# ---------------------------------------------------------------------------
# CLI plumbing


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    try:
        fn()
    except ConfigError as err:
        _fail(2, str(err))
    except (OSError, FieldFormatError) as err:
        _fail(3, str(err))
    except (FloatingPointError, ArithmeticError, RuntimeError) as err:
        _fail(4, str(err))


def _common(config_path, seed, out):
    config = load_config(config_path)
    if seed is not None:
        config["seed"] = int(seed)
    if out is not None:
        config["out_dir"] = out
    out_dir = config["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    return config, int(config["seed"]), out_dir


config_opt = click.option("--config", "config_path", required=True,
                          type=click.Path(exists=True, dir_okay=False),
                          help="Run configuration JSON.")
seed_opt = click.option("--seed", type=int, default=None,
                        help="Override the config master seed.")
out_opt = click.option("--out", type=click.Path(file_okay=False), default=None,
                       help="Override the config output directory.")


@click.group()
@click.version_option(__version__)
def main():
    """Blind denoising via Gibbs-alternated diffusion and HMC sampling."""


# ---------------------------------------------------------------------------
# generate


@main.command()
@config_opt
@seed_opt
@out_opt
def generate(config_path, seed, out):
    """Simulate (x, eps, y) triples with noise parameters from the prior."""

    def run():
        config, master_seed, out_dir = _common(config_path, seed, out)
        dims = _dims(config)
        box = _prior_box(config)
        schedule = _schedule(config)
        spectrum = _noise_spectrum(config)
        n_items = int(config["generate"]["n_items"])
        if n_items < 1:
            raise ConfigError("generate.n_items must be positive")
        cap = max_sigma(schedule)
        if box.upper[0] > cap:
            raise ConfigError(
                f"prior sigma upper bound {box.upper[0]:.4g} exceeds schedule "
                f"capacity b(1)/a(1) = {cap:.4g}; raise beta_max or shrink the prior")
        mean, p = _prior_field_model(config, dims)
        rng = RngStream(master_seed, 1)
        items = []
        for i in range(n_items):
            item_rng = rng.child(i)
            params = box.sample(item_rng.child(0))
            x = sample_stationary_field(mean, p, item_rng.child(1))
            eps = sample_noise(params, dims, item_rng.child(2), spectrum)
            y = x + eps
            paths = {}
            for tag, f in (("x", x), ("eps", eps), ("y", y)):
                rel = f"{tag}_{i:04d}.gdtf"
                save_field(f, os.path.join(out_dir, rel))
                paths[tag] = rel
            items.append({"id": i, "sigma": params.sigma,
                          "spectral": params.spectral.tolist(), **paths})
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            fh.write(canonical_json({"items": items, "config_hash": config_hash(config),
                                     "seed": master_seed}))
        _write_manifest(out_dir, config, master_seed, schedule)
        click.echo(f"wrote {n_items} triples to {out_dir}")

    _guarded(run)


# ---------------------------------------------------------------------------
# train


def _load_dataset(dataset_dir):
    if not dataset_dir or not os.path.isdir(dataset_dir):
        raise ConfigError(f"train.dataset_dir {dataset_dir!r} is not a directory")
    manifest_path = os.path.join(dataset_dir, "manifest.json")
    if os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        names = [item["x"] for item in manifest["items"]]
    else:
        names = sorted(n for n in os.listdir(dataset_dir)
                       if n.startswith("x_") and n.endswith(".gdtf"))
    if not names:
        raise ConfigError(f"no training fields found in {dataset_dir}")
    return [load_field(os.path.join(dataset_dir, n)) for n in names]


@main.command()
@config_opt
@seed_opt
@out_opt
def train(config_path, seed, out):
    """Fit the affine spectral predictor and write it with its loss curve."""

    def run():
        config, master_seed, out_dir = _common(config_path, seed, out)
        dims = _dims(config)
        box = _prior_box(config)
        schedule = _schedule(config)
        spectrum = _noise_spectrum(config)
        tcfg_raw = config["train"]
        dataset = _load_dataset(tcfg_raw["dataset_dir"])
        if dataset[0].dims != dims:
            raise ConfigError("dataset dims do not match problem dims")
        tcfg = TrainConfig(epochs=int(tcfg_raw["epochs"]),
                           draws_per_epoch=int(tcfg_raw["draws_per_epoch"]),
                           batch_size=int(tcfg_raw["batch_size"]),
                           step_size=tcfg_raw["step_size"],
                           momentum=float(tcfg_raw["momentum"]))
        spec_lo, spec_hi = box.lower[1:], box.upper[1:]
        rng = RngStream(master_seed, 2)

        resume = tcfg_raw.get("resume")
        losses = []
        if resume:
            pred = load_predictor(resume)
            state_path = os.path.join(resume, "train_state.json")
            if not os.path.exists(state_path):
                raise ConfigError(f"no train_state.json in checkpoint {resume}")
            with open(state_path) as fh:
                state = json.load(fh)
            epoch_start = int(state["epoch"])
            step = float(state["step_size"])
            losses = list(state["losses"])
            velocity = (load_field(os.path.join(resume, "vel_gains.gdtf")).data
                        .reshape(pred.gains.shape).copy(),
                        load_field(os.path.join(resume, "vel_biases.gdtf")).data
                        .reshape(pred.biases.shape).copy())
        else:
            pred = AffineSpectralPredictor.create(
                dims, n_time_bins=int(tcfg_raw["time_bins"]),
                spectral_lo=float(spec_lo[0]) if spec_lo.size else 0.0,
                spectral_hi=float(spec_hi[0]) if spec_hi.size else 0.0,
                n_spectral_bins=int(tcfg_raw["spectral_bins"]))
            epoch_start = 0
            velocity = None
            hats = [np.fft.fftn(f.data, norm="ortho") for f in dataset]
            step = tcfg.step_size if tcfg.step_size is not None else \
                select_step_size(pred, hats, schedule, (spec_lo, spec_hi), tcfg,
                                 rng, spectrum)

        hats = [np.fft.fftn(f.data, norm="ortho") for f in dataset]
        predictor_dir = os.path.join(out_dir, "predictor")
        loss_path = os.path.join(out_dir, "loss.csv")
        try:
            for epoch in range(epoch_start, tcfg.epochs):
                ep_losses, velocity = run_epochs(
                    pred, hats, schedule, spec_lo, spec_hi, spectrum, tcfg,
                    step, rng, 1, velocity=velocity, epoch_offset=epoch)
                losses.extend(ep_losses)
        except FloatingPointError as err:
            _write_losses(loss_path, losses)
            raise FloatingPointError(
                f"{err}; last finite epoch was {len(losses) - 1} (see {loss_path})")
        _write_losses(loss_path, losses)
        save_predictor(pred, predictor_dir, schedule)
        _save_train_state(predictor_dir, pred, velocity, tcfg.epochs, step, losses)
        _write_manifest(out_dir, config, master_seed, schedule)
        click.echo(f"trained predictor -> {predictor_dir} (final loss "
                   f"{losses[-1]:.6g}, step {step:g})")

    _guarded(run)


def _write_losses(path, losses):
    with open(path, "w") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(losses):
            fh.write(f"{i},{v!r}\n")


def _save_train_state(directory, pred, velocity, epoch, step, losses):
    state = {"epoch": epoch, "step_size": step, "losses": losses}
    with open(os.path.join(directory, "train_state.json"), "w") as fh:
        fh.write(canonical_json(state))
    if velocity is not None:
        save_field(Field(velocity[0].reshape(-1)),
                   os.path.join(directory, "vel_gains.gdtf"))
        save_field(Field(velocity[1].reshape(-1)),
                   os.path.join(directory, "vel_biases.gdtf"))


# ---------------------------------------------------------------------------
# gibbs


@main.command(name="gibbs")
@config_opt
@seed_opt
@out_opt
@click.option("--input", "input_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Observation GDTF to denoise.")
@click.option("--chains", type=int, default=None, help="Override chain count.")
@click.option("--iters", type=int, default=None, help="Override Gibbs iterations.")
@click.option("--truth", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Clean field GDTF for quality metrics.")
def gibbs_cmd(config_path, seed, out, input_path, chains, iters, truth):
    """Blind-denoise one observation: traces, reconstruction, diagnostics."""

    def run():
        config, master_seed, out_dir = _common(config_path, seed, out)
        if chains is not None:
            config["gibbs"]["chains"] = chains
        if iters is not None:
            config["gibbs"]["iterations"] = iters
            config["gibbs"]["warmup_discard"] = min(
                config["gibbs"]["warmup_discard"], max(iters - 1, 0))
        dims = _dims(config)
        schedule = _schedule(config)
        box = _prior_box(config)
        y = load_field(input_path)
        if y.dims != dims:
            raise ConfigError(f"observation dims {y.dims} do not match config {dims}")
        reverse_cfg = ReverseRunConfig(schedule, _predictor(config, dims, schedule),
                                       spectrum=_noise_spectrum(config))
        gcfg = _gibbs_config(config, master_seed)
        traces = gibbs_run(y, gcfg, reverse_cfg, box, _hmc_config(config),
                           rng=RngStream(master_seed, 3))
        ok = [t for t in traces if not t.failed]
        for t in traces:
            save_trace_csv(t, os.path.join(out_dir, f"trace_chain{t.chain_id}.csv"))
        report = _gibbs_report(traces, gcfg)
        report.to_json(os.path.join(out_dir, "diagnostics.json"))
        if not ok:
            raise RuntimeError("all chains failed: " +
                               "; ".join(t.failed for t in traces))
        retained = [f for t in ok for f in t.retained_xs(gcfg.warmup_discard)]
        post_mean = posterior_mean_estimate(retained)
        save_field(post_mean, os.path.join(out_dir, "posterior_mean.gdtf"))
        if truth:
            _quality_rows(out_dir, load_field(truth), ok, post_mean,
                          os.path.basename(input_path), gcfg)
        _write_manifest(out_dir, config, master_seed, schedule)
        click.echo(f"{len(ok)}/{len(traces)} chains ok; wrote traces and "
                   f"posterior mean to {out_dir}")

    _guarded(run)


def _gibbs_report(traces, gcfg) -> DiagnosticsReport:
    report = DiagnosticsReport(n_failed_chains=sum(1 for t in traces if t.failed))
    ok = [t for t in traces if not t.failed]
    if not ok:
        report.notes.append("no successful chains")
        return report
    k = ok[0].phis.shape[1]
    names = ["sigma"] + [f"spectral_{j}" for j in range(k - 1)]
    retained = np.stack([t.retained_phis(gcfg.warmup_discard) for t in ok])
    if len(ok) >= 2 and retained.shape[1] >= 4:
        stats = convergence_stats(retained)
        report.r_hat = {n: float(v) for n, v in zip(names, stats.r_hat)}
        report.flags = [n for n, v in report.r_hat.items() if not v < 1.1]
    else:
        report.notes.append("r_hat omitted: needs >= 2 chains with >= 4 retained draws")
    for j, name in enumerate(names):
        report.ess[name] = [float(ess(t.retained_phis(gcfg.warmup_discard)[:, j]))
                            for t in ok]
    m_retained = retained.shape[1] if len(ok) else 0
    for name, values in report.ess.items():
        if any(v < 0.1 * m_retained for v in values):
            report.notes.append(f"low ESS/M for {name}")
    report.acceptance = {f"chain_{t.chain_id}": float(np.mean(t.accepts[1:]))
                         for t in ok}
    return report


def _quality_rows(out_dir, truth, ok_traces, post_mean, image_id, gcfg):
    last_x = ok_traces[0].retained_xs(gcfg.warmup_discard)[-1]
    can_ssim = min(truth.dims) >= 11
    row = MetricsRow(
        image_id=image_id, method="gibbs",
        sigma=float(ok_traces[0].phis[-1, 0]),
        index=float(ok_traces[0].phis[-1, 1]) if ok_traces[0].phis.shape[1] > 1 else 0.0,
        psnr_sample=psnr(last_x, truth),
        psnr_mean=psnr(post_mean, truth),
        ssim_sample=ssim(last_x, truth) if can_ssim else float("nan"),
        ssim_mean=ssim(post_mean, truth) if can_ssim else float("nan"),
    )
    append_metrics_row(os.path.join(out_dir, "metrics.csv"), row)


# ---------------------------------------------------------------------------
# sbc


def _sbc_pipeline(config, dims, box, schedule, spectrum, kind):
    mean, p = _prior_field_model(config, dims)
    resolution = int(config["sbc"]["grid_resolution"])
    bias_fraction = float(config["sbc"]["bias_fraction"])
    draws_needed = int(config["sbc"]["draws_per_run"])

    def simulate(truth, rng):
        params = NoiseParams.from_vector(truth)
        x = sample_stationary_field(mean, p, rng.child(0))
        eps = sample_noise(params, dims, rng.child(1), spectrum)
        return x + eps

    if kind in ("grid_oracle", "grid_oracle_biased"):
        def pipeline(truth, rng):
            y = simulate(truth, rng)
            grid = phi_grid_posterior(LinearGaussianProblem(mean, p, y, spectrum),
                                      box, resolution)
            draws = sample_from_grid(grid, draws_needed, rng.child(2))
            if kind == "grid_oracle_biased":
                draws = np.clip(draws + bias_fraction * box.widths[None, :],
                                box.lower, box.upper)
            return draws
        return pipeline, 1

    if kind == "gibbs":
        reverse_proto = dict(schedule=schedule, spectrum=spectrum)

        def pipeline(truth, rng):
            y = simulate(truth, rng)
            reverse_cfg = ReverseRunConfig(
                predictor=GaussianPriorPredictor(mean, p, schedule, spectrum),
                **reverse_proto)
            gcfg = _gibbs_config(config, seed=0)
            gcfg = GibbsConfig(iterations=gcfg.iterations, n_chains=gcfg.n_chains,
                               warmup_discard=gcfg.warmup_discard,
                               init_strategy=gcfg.init_strategy,
                               thin_x_every=0, seed=0)
            traces = gibbs_run(y, gcfg, reverse_cfg, box, rng=rng.child(2))
            ok = [t for t in traces if not t.failed]
            if not ok:
                raise RuntimeError("all chains failed")
            return np.concatenate([t.retained_phis(gcfg.warmup_discard) for t in ok])
        return pipeline, None

    raise ConfigError(f"unknown sbc pipeline {kind!r}")


@main.command(name="sbc")
@config_opt
@seed_opt
@out_opt
def sbc_cmd(config_path, seed, out):
    """Rank-uniformity calibration of a posterior pipeline under the prior."""

    def run():
        config, master_seed, out_dir = _common(config_path, seed, out)
        scfg = config["sbc"]
        n_runs = int(scfg["n_runs"])
        if n_runs < 1:
            raise ConfigError("sbc.n_runs must be positive")
        dims = _dims(config)
        box = _prior_box(config)
        schedule = _schedule(config)
        spectrum = _noise_spectrum(config)
        pipeline, default_thin = _sbc_pipeline(config, dims, box, schedule,
                                               spectrum, scfg["pipeline"])
        thinning = scfg["thinning"] if scfg["thinning"] is not None else default_thin
        result = sbc(pipeline, box, n_runs, int(scfg["draws_per_run"]),
                     RngStream(master_seed, 4), thinning=thinning,
                     n_bins=int(scfg["bins"]))
        names = ["sigma"] + [f"spectral_{j}" for j in range(box.dim - 1)]
        export_rank_histogram_csv(result, os.path.join(out_dir, "sbc_histograms.csv"),
                                  names)
        verdicts = {n: ("uniform" if pv > 0.01 else "non-uniform")
                    for n, pv in zip(names, result.p_values)}
        blob = {"pipeline": scfg["pipeline"], "n_runs": n_runs,
                "n_failed": result.n_failed,
                "chi2": {n: float(v) for n, v in zip(names, result.chi2_stats)},
                "p_values": {n: float(v) for n, v in zip(names, result.p_values)},
                "verdicts": verdicts}
        with open(os.path.join(out_dir, "sbc_report.json"), "w") as fh:
            fh.write(canonical_json(blob))
        _write_manifest(out_dir, config, master_seed, schedule)
        click.echo(f"sbc p-values: {blob['p_values']}")

    _guarded(run)


# ---------------------------------------------------------------------------
# diagnose


@main.command()
@click.argument("trace_files", nargs=-1, required=True,
                type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default=".",
              help="Directory for the diagnostics report.")
@click.option("--discard", type=int, default=0,
              help="Initial iterations to drop before computing statistics.")
def diagnose(trace_files, out, discard):
    """R-hat and ESS over stored chain traces."""

    def run():
        traces = []
        for path in trace_files:
            try:
                traces.append(load_trace_csv(path))
            except ValueError as err:
                raise OSError(f"malformed trace CSV: {err}") from err
        k = traces[0].phis.shape[1]
        names = ["sigma"] + [f"spectral_{j}" for j in range(k - 1)]
        report = DiagnosticsReport()
        kept = [t.phis[discard:] for t in traces]
        if any(p.shape != kept[0].shape for p in kept):
            raise OSError("trace files have inconsistent shapes")
        for j, name in enumerate(names):
            report.ess[name] = [float(ess(p[:, j])) for p in kept]
        if len(traces) >= 2:
            stacked = np.stack(kept)
            stats = convergence_stats(stacked)
            report.r_hat = {n: float(v) for n, v in zip(names, stats.r_hat)}
            report.flags = [n for n, v in report.r_hat.items() if not v < 1.1]
        else:
            report.notes.append("r_hat omitted: single chain")
        os.makedirs(out, exist_ok=True)
        report.to_json(os.path.join(out, "diagnostics.json"))
        flagged = ", ".join(report.flags) if report.flags else "none"
        click.echo(f"r_hat flags (>= 1.1): {flagged}")

    _guarded(run)


# ---------------------------------------------------------------------------
# oracle-compare


@main.command(name="oracle-compare")
@config_opt
@out_opt
@click.option("--input", "input_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Observation GDTF the traces were run on.")
@click.argument("trace_files", nargs=-1, required=True,
                type=click.Path(exists=True, dir_okay=False))
@click.option("--discard", type=int, default=None,
              help="Initial iterations to drop (default: gibbs.warmup_discard).")
def oracle_compare(config_path, out, input_path, trace_files, discard):
    """Wasserstein distance of trace marginals against the grid posterior."""

    def run():
        config, master_seed, out_dir = _common(config_path, None, out)
        dims = _dims(config)
        box = _prior_box(config)
        y = load_field(input_path)
        if y.dims != dims:
            raise ConfigError(f"observation dims {y.dims} do not match config {dims}")
        mean, p = _prior_field_model(config, dims)
        grid = phi_grid_posterior(LinearGaussianProblem(mean, p, y,
                                                        _noise_spectrum(config)),
                                  box, int(config["oracle"]["grid_resolution"]))
        grid.export_csv(os.path.join(out_dir, "oracle_marginals.csv"),
                        ["sigma"] + [f"spectral_{j}" for j in range(box.dim - 1)])
        drop = discard if discard is not None else int(config["gibbs"]["warmup_discard"])
        draws = []
        for path in trace_files:
            try:
                trace = load_trace_csv(path)
            except ValueError as err:
                raise OSError(f"malformed trace CSV: {err}") from err
            draws.append(trace.phis[drop + 1:])
        pooled = np.concatenate(draws)
        names = ["sigma"] + [f"spectral_{j}" for j in range(box.dim - 1)]
        w1 = {n: float(wasserstein1(pooled[:, j], grid.axes[j], grid.marginal(j)))
              for j, n in enumerate(names)}
        blob = {"w1": w1, "n_draws": int(pooled.shape[0]),
                "oracle_mode": grid.mode().tolist()}
        with open(os.path.join(out_dir, "oracle_compare.json"), "w") as fh:
            fh.write(canonical_json(blob))
        click.echo(f"w1 distances: {w1}")

    _guarded(run)


if __name__ == "__main__":
    main()

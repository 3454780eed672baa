"""Run-directory pipeline stages: data generation, training, sampling, and
evaluation.  The CLI is a thin wrapper around these functions; tests drive
them directly.

Every stage is deterministic given (config, seeds): bundles and CSVs written
twice from the same config are byte-identical.  The plain-text run.log (one
line per stage with wall time and output hashes) is the only
non-reproducible output.
"""

from __future__ import annotations

import csv
import hashlib
import time
from pathlib import Path

import numpy as np

from .baselines import Regressor, RegressorConfig, bicubic_sr, regressor_sr, train_regressor
from .bundle import (
    read_bundle,
    read_fieldset,
    load_params,
    save_params,
    write_bundle,
    write_fieldset,
)
from .config import RunConfig
from .denoiser import ConvDenoiser, conditional_input, train_denoiser
from .diagnostics import (
    METRICS_SCHEMA,
    MetricsReport,
    band_power_ratio,
    default_pdf_range,
    eof,
    pdf,
    temporal_std,
    weighted_rmse,
    weighted_rmse_per_step,
    zonal_climatology,
    zonal_spectrum,
)
from .edm import pf_ode_sample
from .grid import Grid, ResamplePair, make_latlon_grid, make_resample_pair
from .guidance import GuidanceConfig, posterior_sample
from .synthdata import (
    FieldSet,
    NormStats,
    SpectrumSpec,
    compute_norm_stats,
    denormalize,
    generate_grf,
    make_precip_like,
    normalize,
    perturb_imperfect,
)

SAMPLE_METHODS = ("bicubic", "regressor", "conditional-edm", "posterior-edm")
TRAIN_MODELS = ("denoiser-cond", "denoiser-uncond", "regressor")


def derive_seed(*parts) -> int:
    """Stable integer sub-seed from a tuple of ints/strings."""
    ints = [p if isinstance(p, int) else int.from_bytes(
        hashlib.sha256(str(p).encode()).digest()[:4], "little") for p in parts]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


def _log_stage(run_dir: Path, stage: str, dt: float, outputs: list[Path]) -> None:
    hashes = []
    for p in outputs:
        digest = hashlib.sha256(Path(p).read_bytes()).hexdigest()[:12]
        hashes.append(f"{Path(p).name}:{digest}")
    line = f"stage={stage} wall={dt:.2f}s outputs={','.join(hashes)}\n"
    with open(run_dir / "run.log", "a") as fh:
        fh.write(line)


def make_pair(cfg: RunConfig) -> ResamplePair:
    return make_resample_pair(make_latlon_grid(cfg.n_lat, cfg.n_lon), cfg.factor)


def make_forcing(cfg: RunConfig, grid: Grid) -> np.ndarray:
    """Static smooth random field standing in for orography (zero mean, unit std)."""
    spec = SpectrumSpec(alpha=cfg.forcing_alpha, k_min=cfg.forcing_k_min,
                        k_max=cfg.forcing_k_max, amplitude=1.0)
    raw = generate_grf(grid, spec, seed=derive_seed(cfg.seed, "forcing"), n_time=1)
    f = raw.data[0, 0]
    return (f - f.mean()) / f.std()


def synthesize_fields(cfg: RunConfig, grid: Grid, forcing: np.ndarray,
                      n_time: int, split: str) -> FieldSet:
    """Fixed climatology (zonal profile + forcing-locked detail) plus
    independent GRF anomalies per slice; precip channels thresholded."""
    zonal_profile = np.cos(np.deg2rad(grid.lat_centers))[:, None]
    data = np.empty((n_time, len(cfg.channels), grid.n_lat, grid.n_lon))
    precip_idx = []
    for ci, ch in enumerate(cfg.channels):
        spec = SpectrumSpec(alpha=ch.alpha, k_min=ch.k_min, k_max=ch.k_max,
                            amplitude=ch.amplitude)
        anom = generate_grf(grid, spec, seed=derive_seed(cfg.seed, split, ci),
                            n_time=n_time).data[:, 0]
        scale = anom.std()
        clim = ch.zonal_amp * scale * zonal_profile + ch.forcing_amp * scale * forcing
        field = clim[None] + anom
        if ch.precip:
            field = make_precip_like(field, ch.threshold * scale)
            precip_idx.append(ci)
        data[:, ci] = field
    return FieldSet(
        data=data,
        channel_names=[ch.name for ch in cfg.channels],
        grid=grid,
        precip_channels=tuple(precip_idx),
    )


def _stats_to_bundle(path: Path, stats: NormStats, config_hash: str) -> Path:
    return write_bundle(
        path,
        np.stack([stats.mean, stats.std]),
        dim_names=["stat", "channel"],
        config_hash=config_hash,
        extra={
            "log_eps": stats.log_eps,
            "precip_mask": [bool(v) for v in stats.precip_mask],
        },
    )


def _stats_from_bundle(path: Path) -> NormStats:
    data, manifest = read_bundle(path)
    arr = np.asarray(data, dtype=float)
    return NormStats(
        mean=arr[0],
        std=arr[1],
        precip_mask=np.asarray(manifest["extra"]["precip_mask"], dtype=bool),
        log_eps=float(manifest["extra"]["log_eps"]),
    )


def gen_data(cfg: RunConfig) -> dict[str, Path]:
    """Generate paired train/eval datasets, forcing, and normalization stats."""
    t0 = time.time()
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    chash = cfg.config_hash()
    pair = make_pair(cfg)
    forcing = make_forcing(cfg, pair.fine)
    out: dict[str, Path] = {}
    for split, n_time in (("train", cfg.n_train), ("eval", cfg.n_eval)):
        fine = synthesize_fields(cfg, pair.fine, forcing, n_time, split)
        coarse = FieldSet(
            data=np.asarray(__import__("diffsr.grid", fromlist=["coarsen"]).coarsen(
                fine.data, pair)),
            channel_names=list(fine.channel_names),
            grid=pair.coarse,
            precip_channels=fine.precip_channels,
        )
        out[f"fine_{split}"] = write_fieldset(
            run_dir / f"fine_{split}.f32", fine, chash, cfg.seed)
        out[f"coarse_{split}"] = write_fieldset(
            run_dir / f"coarse_{split}.f32", coarse, chash, cfg.seed)
        if split == "eval":
            k0 = cfg.perturb_k0
            damp = cfg.perturb_damping
            perturbed = perturb_imperfect(
                coarse,
                damping=lambda k: np.where(k > k0, damp, 1.0),
                bias=cfg.perturb_bias,
                seed=derive_seed(cfg.seed, "perturb"),
                noise_amp=cfg.perturb_noise,
            )
            out["coarse_eval_perturbed"] = write_fieldset(
                run_dir / "coarse_eval_perturbed.f32", perturbed, chash, cfg.seed)
        if split == "train":
            stats = compute_norm_stats(fine, eps_fraction=cfg.eps_fraction)
            out["norm_stats"] = _stats_to_bundle(run_dir / "norm_stats.f32", stats, chash)
    out["forcing"] = write_bundle(
        run_dir / "forcing.f32", forcing, dim_names=["lat", "lon"],
        grid=pair.fine, config_hash=chash, seed=cfg.seed)
    _log_stage(run_dir, "gen-data", time.time() - t0, sorted(out.values()))
    return out


def _load_common(cfg: RunConfig):
    run_dir = cfg.run_dir()
    pair = make_pair(cfg)
    stats = _stats_from_bundle(run_dir / "norm_stats.f32")
    forcing, _ = read_bundle(run_dir / "forcing.f32")
    return run_dir, pair, stats, np.asarray(forcing, dtype=float)


def _posterior_cond_channels(cfg: RunConfig) -> int:
    return 1 if cfg.posterior_conditional else 0


def _build_cond(cfg: RunConfig, coarse_norm: np.ndarray, forcing: np.ndarray,
                pair: ResamplePair, model: str) -> np.ndarray | None:
    if model == "denoiser-cond":
        return conditional_input(coarse_norm, forcing, pair)
    if model == "denoiser-uncond" and cfg.posterior_conditional:
        from .grid import bicubic_upsample

        return bicubic_upsample(coarse_norm[:, :1], pair)
    return None


def train_model(cfg: RunConfig, model: str) -> dict[str, Path]:
    """Train one of {denoiser-cond, denoiser-uncond, regressor}."""
    if model not in TRAIN_MODELS:
        raise ValueError(f"unknown model {model!r}; choose from {TRAIN_MODELS}")
    t0 = time.time()
    run_dir, pair, stats, forcing = _load_common(cfg)
    chash = cfg.config_hash()
    fine = read_fieldset(run_dir / "fine_train.f32")
    coarse = read_fieldset(run_dir / "coarse_train.f32")
    fine_norm = normalize(fine, stats).data
    coarse_norm = normalize(coarse, stats).data
    seed = derive_seed(cfg.seed, "train", model)
    if model == "regressor":
        reg, result = train_regressor(
            coarse_norm, fine_norm, forcing, pair,
            RegressorConfig(n_channels=fine.n_channels,
                            base_width=cfg.reg_base_width,
                            depth=cfg.reg_depth,
                            groups_cap=cfg.groups_cap,
                            seed=cfg.seed),
            cfg.train_config(), seed)
        params = reg.net.parameters()
    else:
        conditional = model == "denoiser-cond"
        den_cfg = cfg.denoiser_config(conditional)
        if not conditional:
            den_cfg = type(den_cfg)(**{**den_cfg.__dict__,
                                       "n_cond_channels": _posterior_cond_channels(cfg)})
        den = ConvDenoiser(den_cfg)
        cond = _build_cond(cfg, coarse_norm, forcing, pair, model)
        result = train_denoiser(den, fine_norm, cfg.schedule(), cfg.train_config(),
                                seed, cond=cond)
        params = den.net.parameters()
    ckpt = save_params(run_dir / f"ckpt_{model}.f32", params, chash, cfg.seed,
                       extra={"model": model})
    loss_csv = run_dir / f"loss_{model}.csv"
    with open(loss_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, v in enumerate(result.loss_trace):
            writer.writerow([i, repr(float(v))])
    _log_stage(run_dir, f"train-{model}", time.time() - t0, [ckpt, loss_csv])
    return {"checkpoint": ckpt, "loss": loss_csv}


def _load_denoiser(cfg: RunConfig, model: str) -> ConvDenoiser:
    run_dir = cfg.run_dir()
    conditional = model == "denoiser-cond"
    den_cfg = cfg.denoiser_config(conditional)
    if not conditional:
        den_cfg = type(den_cfg)(**{**den_cfg.__dict__,
                                   "n_cond_channels": _posterior_cond_channels(cfg)})
    den = ConvDenoiser(den_cfg)
    load_params(run_dir / f"ckpt_{model}.f32", den.net.parameters())
    return den


def _load_regressor(cfg: RunConfig, n_channels: int) -> Regressor:
    run_dir = cfg.run_dir()
    reg = Regressor(RegressorConfig(n_channels=n_channels,
                                    base_width=cfg.reg_base_width,
                                    depth=cfg.reg_depth,
                                    groups_cap=cfg.groups_cap,
                                    seed=cfg.seed))
    load_params(run_dir / "ckpt_regressor.f32", reg.net.parameters())
    return reg


def ingest_coarse(coarse: FieldSet) -> tuple[FieldSet, int]:
    """Clamp negative precipitation on ingestion; returns the clamp count."""
    data = coarse.data.copy()
    clamped = 0
    for c in coarse.precip_channels:
        neg = data[:, c] < 0
        clamped += int(neg.sum())
        data[:, c] = np.maximum(data[:, c], 0.0)
    return FieldSet(data=data, channel_names=list(coarse.channel_names),
                    grid=coarse.grid, time_step_hours=coarse.time_step_hours,
                    precip_channels=coarse.precip_channels), clamped


def _clamp_precip(fields: FieldSet) -> FieldSet:
    data = fields.data.copy()
    for c in fields.precip_channels:
        data[:, c] = np.maximum(data[:, c], 0.0)
    return FieldSet(data=data, channel_names=list(fields.channel_names),
                    grid=fields.grid, time_step_hours=fields.time_step_hours,
                    precip_channels=fields.precip_channels)


def sample(cfg: RunConfig, method: str, n_ensemble: int | None = None,
           input_kind: str = "clean") -> Path:
    """Produce prediction bundles for one method on the eval coarse inputs."""
    if method not in SAMPLE_METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {SAMPLE_METHODS}")
    if input_kind not in ("clean", "perturbed"):
        raise ValueError("input_kind must be 'clean' or 'perturbed'")
    t0 = time.time()
    run_dir, pair, stats, forcing = _load_common(cfg)
    chash = cfg.config_hash()
    n_ens = cfg.n_ensemble if n_ensemble is None else n_ensemble
    src = "coarse_eval.f32" if input_kind == "clean" else "coarse_eval_perturbed.f32"
    coarse, n_clamped = ingest_coarse(read_fieldset(run_dir / src))
    n_time, n_ch = coarse.n_time, coarse.n_channels
    if method in ("bicubic", "regressor"):
        if method == "bicubic":
            pred = bicubic_sr(coarse, pair)
        else:
            pred = regressor_sr(_load_regressor(cfg, n_ch), coarse, forcing, pair, stats)
        members = pred.data[None]
    elif method == "conditional-edm":
        den = _load_denoiser(cfg, "denoiser-cond")
        coarse_norm = normalize(coarse, stats).data
        cond = conditional_input(coarse_norm, forcing, pair)
        members = np.empty((n_ens, n_time, n_ch) + pair.fine.shape)
        for e in range(n_ens):
            x = pf_ode_sample(
                den, cfg.schedule(), (n_time, n_ch) + pair.fine.shape,
                seed=derive_seed(cfg.seed, "sample", method, e), cond=cond)
            fs = FieldSet(data=x, channel_names=list(coarse.channel_names),
                          grid=pair.fine, precip_channels=coarse.precip_channels)
            members[e] = _clamp_precip(denormalize(fs, stats)).data
    else:  # posterior-edm
        den = _load_denoiser(cfg, "denoiser-uncond")
        coarse_norm = normalize(coarse, stats).data
        gcfg = GuidanceConfig(pair=pair, sigma_y=cfg.guidance_sigma_y,
                              gamma_hat=cfg.guidance_gamma_hat,
                              lambda_g=cfg.guidance_lambda_g, stats=stats)
        sch = type(cfg.schedule())(**{**cfg.schedule().__dict__,
                                      "n_steps": cfg.posterior_sampler_steps})
        members = np.empty((n_ens, n_time, n_ch) + pair.fine.shape)
        residuals = np.empty((n_ens, n_time))
        for t in range(n_time):
            cond = None
            if cfg.posterior_conditional:
                from .grid import bicubic_upsample

                cond = np.broadcast_to(
                    bicubic_upsample(coarse_norm[t : t + 1, :1], pair)[0],
                    (n_ens, 1) + pair.fine.shape)
            ens = posterior_sample(den, sch, coarse_norm[t], gcfg,
                                   seed=derive_seed(cfg.seed, "sample", method, t),
                                   n_ensemble=n_ens, cond=cond)
            fs = FieldSet(data=ens.samples, channel_names=list(coarse.channel_names),
                          grid=pair.fine, precip_channels=coarse.precip_channels)
            members[:, t] = _clamp_precip(denormalize(fs, stats)).data
            residuals[:, t] = ens.measurement_residuals
        res_path = write_bundle(run_dir / f"residuals_{method}.f32", residuals,
                                dim_names=["ensemble", "time"], config_hash=chash,
                                seed=cfg.seed)
    out = write_bundle(
        run_dir / f"pred_{method}.f32",
        members,
        dim_names=["ensemble", "time", "channel", "lat", "lon"],
        channel_names=list(coarse.channel_names),
        grid=pair.fine,
        config_hash=chash,
        seed=cfg.seed,
        extra={
            "method": method,
            "input_kind": input_kind,
            "n_clamped_coarse": n_clamped,
            "precip_channels": list(coarse.precip_channels),
        },
    )
    outputs = [out] + ([res_path] if method == "posterior-edm" else [])
    _log_stage(run_dir, f"sample-{method}", time.time() - t0, outputs)
    return out


def _members_to_fieldsets(data: np.ndarray, manifest: dict, grid: Grid) -> list[FieldSet]:
    return [
        FieldSet(
            data=np.asarray(member, dtype=float),
            channel_names=list(manifest["channel_names"]),
            grid=grid,
            precip_channels=tuple(manifest["extra"].get("precip_channels", ())),
        )
        for member in data
    ]


def evaluate(cfg: RunConfig, pred_paths: dict[str, Path] | None = None,
             truth_path: Path | None = None) -> Path:
    """Compute the diagnostic battery for every prediction bundle and write
    the combined metrics CSV (rank column per metric/channel, 1 = lowest)."""
    t0 = time.time()
    run_dir, pair, stats, forcing = _load_common(cfg)
    chash = cfg.config_hash()
    truth = read_fieldset(truth_path or run_dir / "fine_eval.f32")
    if pred_paths is None:
        pred_paths = {
            m: run_dir / f"pred_{m}.f32"
            for m in SAMPLE_METHODS
            if (run_dir / f"pred_{m}.f32").exists()
        }
    if not pred_paths:
        raise FileNotFoundError(f"no prediction bundles found under {run_dir}")
    k_nyq_coarse = pair.coarse.n_lon // 2
    truth_spec = zonal_spectrum(truth)
    pdf_range = default_pdf_range(truth)
    eof_modes = min(4, truth.n_time - 1)
    truth_eof = eof(truth.data[:, 0], truth.grid, eof_modes)
    outputs = []
    reports: list[MetricsReport] = []
    for model, path in sorted(pred_paths.items()):
        data, manifest = read_bundle(path)
        members = _members_to_fieldsets(data, manifest, truth.grid)
        ens_mean = FieldSet(
            data=np.mean([m.data for m in members], axis=0),
            channel_names=list(truth.channel_names),
            grid=truth.grid,
            precip_channels=truth.precip_channels,
        )
        member_specs = [zonal_spectrum(m) for m in members]
        mean_power = np.mean([s.power for s in member_specs], axis=0)
        mean_spec = type(truth_spec)(wavenumbers=truth_spec.wavenumbers, power=mean_power)
        pooled = FieldSet(
            data=np.concatenate([m.data for m in members], axis=0),
            channel_names=list(truth.channel_names),
            grid=truth.grid,
            precip_channels=truth.precip_channels,
        )
        pdf_res = pdf(pooled, bins=64, value_range=pdf_range)
        eof_res = eof(members[0].data[:, 0], truth.grid, eof_modes)
        report = MetricsReport(
            model=model,
            config_hash=chash,
            seed=cfg.seed,
            channel_names=list(truth.channel_names),
            rmse_clim=weighted_rmse(ens_mean, truth),
            rmse_per_step=weighted_rmse_per_step(ens_mean, truth),
            temporal_std_pred=np.mean([temporal_std(m) for m in members], axis=0),
            temporal_std_truth=temporal_std(truth),
            highband_ratio=band_power_ratio(mean_spec, truth_spec, k_nyq_coarse + 1),
            pdf_q_low=pdf_res.q_low,
            pdf_q_high=pdf_res.q_high,
            eof1_explained=float(eof_res.explained[0]),
        )
        reports.append(report)
        outputs.append(write_bundle(
            run_dir / f"spectrum_{model}.f32", mean_spec.power,
            dim_names=["channel", "wavenumber"], config_hash=chash, seed=cfg.seed))
        outputs.append(write_bundle(
            run_dir / f"zonal_profile_{model}.f32", zonal_climatology(ens_mean),
            dim_names=["channel", "lat"], config_hash=chash, seed=cfg.seed))
        outputs.append(write_bundle(
            run_dir / f"eof1_pattern_{model}.f32", eof_res.patterns[0],
            dim_names=["lat", "lon"], config_hash=chash, seed=cfg.seed))
        outputs.append(write_bundle(
            run_dir / f"pdf_{model}.f32",
            np.concatenate([pdf_res.bin_edges, pdf_res.density], axis=1),
            dim_names=["channel", "edges_then_density"],
            config_hash=chash, seed=cfg.seed))
    outputs.append(write_bundle(
        run_dir / "spectrum_truth.f32", truth_spec.power,
        dim_names=["channel", "wavenumber"], config_hash=chash, seed=cfg.seed))
    outputs.append(write_bundle(
        run_dir / "zonal_profile_truth.f32", zonal_climatology(truth),
        dim_names=["channel", "lat"], config_hash=chash, seed=cfg.seed))
    outputs.append(write_bundle(
        run_dir / "eof1_pattern_truth.f32", truth_eof.patterns[0],
        dim_names=["lat", "lon"], config_hash=chash, seed=cfg.seed))
    # combined CSV with rank per (metric, channel), ascending value
    rows = []
    for rep in reports:
        rows.extend(rep.rows())
    ranks: dict[tuple[str, str], dict[str, int]] = {}
    for metric, channel in {(m, c) for (_, c, m, _) in rows}:
        group = sorted(
            [(v, model) for (model, c, m, v) in rows if m == metric and c == channel]
        )
        ranks[(metric, channel)] = {model: i + 1 for i, (_, model) in enumerate(group)}
    csv_path = run_dir / "metrics.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["schema", "model", "channel", "metric", "value", "rank"])
        for model, channel, metric, value in rows:
            writer.writerow([METRICS_SCHEMA, model, channel, metric, repr(value),
                             ranks[(metric, channel)][model]])
    outputs.append(csv_path)
    _log_stage(run_dir, "evaluate", time.time() - t0, outputs)
    return csv_path

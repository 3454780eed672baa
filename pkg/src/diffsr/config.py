"""Experiment configuration: one YAML file drives a whole run.

Scalar fields can be overridden from the CLI (precedence: flags > file >
defaults).  Validation collects every problem before raising, so a broken
config reports all of its errors at once.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .denoiser import ConvDenoiserConfig, TrainConfig
from .edm import NoiseSchedule
from .nn import OptimizerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelSpec:
    name: str
    alpha: float = 3.0
    k_min: int = 1
    k_max: int = 9
    amplitude: float = 1.0
    zonal_amp: float = 0.0  # amplitude of the fixed zonal-profile climatology
    forcing_amp: float = 0.0  # amplitude of the forcing-locked climatology
    precip: bool = False
    threshold: float = 0.0  # precip thresholding level (precip channels only)


@dataclass(frozen=True)
class RunConfig:
    output_root: str = "runs"
    run_name: str = "demo"
    seed: int = 0
    # grids
    n_lat: int = 24
    n_lon: int = 48
    factor: int = 4
    # data
    channels: tuple[ChannelSpec, ...] = (
        ChannelSpec(name="theta", alpha=3.0, k_min=1, k_max=9, amplitude=1.0,
                    zonal_amp=0.6, forcing_amp=0.8),
        ChannelSpec(name="precip", alpha=3.0, k_min=1, k_max=9, amplitude=1.0,
                    zonal_amp=0.3, forcing_amp=0.5, precip=True, threshold=0.2),
    )
    n_train: int = 160
    n_eval: int = 48
    eps_fraction: float = 0.01
    # static forcing field spectrum
    forcing_alpha: float = 2.0
    forcing_k_min: int = 1
    forcing_k_max: int = 9
    # imperfect-input perturbation
    perturb_k0: float = 4.0
    perturb_damping: float = 0.8
    perturb_bias: float = 0.05
    perturb_noise: float = 0.02
    # EDM schedule
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    sampler_steps: int = 40
    sigma_data: float = 1.2
    p_mean: float = 0.0
    p_std: float = 2.0
    # denoiser architecture
    base_width: int = 16
    channel_mults: tuple[int, ...] = (1, 2, 4)
    blocks_per_level: int = 2
    emb_dim: int = 64
    groups_cap: int = 8
    # regressor architecture
    reg_base_width: int = 16
    reg_depth: int = 3
    # training
    train_steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_frac: float = 0.05
    # guidance
    guidance_sigma_y: float = 1e-4
    guidance_gamma_hat: float = 0.01
    guidance_lambda_g: float = 1.0
    posterior_sampler_steps: int = 128
    posterior_conditional: bool = False  # single-channel-conditioned prior variant
    # sampling
    n_ensemble: int = 1

    def validate(self) -> None:
        errors: list[str] = []
        if self.n_lat < 2 or self.n_lon < 4 or self.n_lon % 2:
            errors.append(f"grid ({self.n_lat}, {self.n_lon}) must be >= (2, 4) with even n_lon")
        if self.factor < 1 or self.n_lat % self.factor or self.n_lon % self.factor:
            errors.append(f"factor {self.factor} must divide grid ({self.n_lat}, {self.n_lon})")
        div = 2 ** (len(self.channel_mults) - 1)
        if self.n_lat % div or self.n_lon % div:
            errors.append(
                f"grid ({self.n_lat}, {self.n_lon}) not divisible by 2^(levels-1) = {div}"
            )
        if not self.channels:
            errors.append("at least one channel is required")
        for ch in self.channels:
            if ch.alpha <= 0:
                errors.append(f"channel {ch.name}: alpha must be positive")
            if not (1 <= ch.k_min < ch.k_max <= self.n_lon // 2):
                errors.append(
                    f"channel {ch.name}: band [{ch.k_min}, {ch.k_max}] invalid for "
                    f"n_lon={self.n_lon}"
                )
        if not (1 <= self.forcing_k_min < self.forcing_k_max <= self.n_lon // 2):
            errors.append("forcing band invalid")
        if self.n_train < 2 or self.n_eval < 2:
            errors.append("n_train and n_eval must be >= 2")
        if not (0 < self.perturb_damping <= 1):
            errors.append(f"perturb_damping {self.perturb_damping} must lie in (0, 1]")
        if not (0 < self.sigma_min < self.sigma_max):
            errors.append("need 0 < sigma_min < sigma_max")
        if self.sampler_steps < 2 or self.posterior_sampler_steps < 2:
            errors.append("sampler step counts must be >= 2")
        if self.sigma_data <= 0 or self.p_std <= 0:
            errors.append("sigma_data and p_std must be positive")
        if self.train_steps < 1 or self.batch_size < 1:
            errors.append("train_steps and batch_size must be >= 1")
        if self.lr <= 0:
            errors.append("learning rate must be positive")
        if self.guidance_sigma_y < 0 or self.guidance_gamma_hat < 0:
            errors.append("guidance sigma_y and gamma_hat must be nonnegative")
        if self.guidance_sigma_y == 0 and self.guidance_gamma_hat == 0:
            errors.append("guidance needs sigma_y > 0 or gamma_hat > 0")
        if self.n_ensemble < 1:
            errors.append("n_ensemble must be >= 1")
        if errors:
            raise ConfigError(
                "invalid configuration:\n  - " + "\n  - ".join(errors)
            )

    # derived objects -------------------------------------------------------

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(
            sigma_min=self.sigma_min,
            sigma_max=self.sigma_max,
            rho=self.rho,
            n_steps=self.sampler_steps,
            sigma_data=self.sigma_data,
            p_mean=self.p_mean,
            p_std=self.p_std,
        )

    def denoiser_config(self, conditional: bool) -> ConvDenoiserConfig:
        c = len(self.channels)
        return ConvDenoiserConfig(
            n_channels=c,
            n_cond_channels=(c + 1) if conditional else 0,
            base_width=self.base_width,
            channel_mults=tuple(self.channel_mults),
            blocks_per_level=self.blocks_per_level,
            emb_dim=self.emb_dim,
            groups_cap=self.groups_cap,
            sigma_data=self.sigma_data,
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            n_steps=self.train_steps,
            batch_size=self.batch_size,
            optimizer=OptimizerConfig(
                lr=self.lr,
                weight_decay=self.weight_decay,
                warmup_frac=self.warmup_frac,
            ),
        )

    def run_dir(self) -> Path:
        return Path(self.output_root) / self.run_name

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path: str | Path | None = None, overrides: dict | None = None,
                output_root_env: str | None = None) -> RunConfig:
    """Build a RunConfig from YAML + overrides (flags > file > defaults)."""
    raw: dict = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a YAML mapping")
        raw.update(loaded)
    if output_root_env and "output_root" not in raw:
        raw["output_root"] = output_root_env
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})
    known = set(RunConfig.__dataclass_fields__)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
    if "channels" in raw:
        chans = []
        for entry in raw["channels"]:
            extra = set(entry) - set(ChannelSpec.__dataclass_fields__)
            if extra:
                raise ConfigError(f"unknown channel fields: {', '.join(sorted(extra))}")
            chans.append(ChannelSpec(**entry))
        raw["channels"] = tuple(chans)
    if "channel_mults" in raw:
        raw["channel_mults"] = tuple(raw["channel_mults"])
    cfg = RunConfig(**raw)
    cfg.validate()
    return cfg

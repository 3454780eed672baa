"""Deterministic super-resolution comparators: channel-wise bicubic
interpolation and a small L1-trained encoder-decoder regressor operating on
bicubic-pre-upsampled inputs plus a static forcing channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .grid import ResamplePair, bicubic_upsample
from .nn import AdamW, OptimizerConfig, RegressorUNet, lr_at
from .synthdata import FieldSet, NormStats, denormalize, normalize
from .denoiser import TrainConfig, TrainResult


def bicubic_sr(coarse: FieldSet, pair: ResamplePair) -> FieldSet:
    """Bicubic upsampling baseline; precipitation clamped at zero."""
    if coarse.grid.shape != pair.coarse.shape:
        raise ValueError(
            f"coarse FieldSet grid {coarse.grid.shape} != pair.coarse {pair.coarse.shape}"
        )
    data = bicubic_upsample(coarse.data, pair)
    for c in coarse.precip_channels:
        data[:, c] = np.maximum(data[:, c], 0.0)
    return FieldSet(
        data=data,
        channel_names=list(coarse.channel_names),
        grid=pair.fine,
        time_step_hours=coarse.time_step_hours,
        precip_channels=coarse.precip_channels,
    )


@dataclass(frozen=True)
class RegressorConfig:
    n_channels: int
    base_width: int = 16
    depth: int = 3
    groups_cap: int = 8
    seed: int = 0


class Regressor:
    """Deterministic UNet mapping [upsampled coarse | forcing] -> fine."""

    def __init__(self, config: RegressorConfig):
        self.config = config
        self.net = RegressorUNet(
            c_in=config.n_channels + 1,
            c_out=config.n_channels,
            base_width=config.base_width,
            depth=config.depth,
            groups_cap=config.groups_cap,
            seed=config.seed,
        )

    @property
    def n_params(self) -> int:
        return self.net.n_params()

    def __call__(self, inputs: np.ndarray) -> np.ndarray:
        y, _ = self.net.forward(inputs)
        return y


def regressor_inputs(coarse_norm: np.ndarray, forcing: np.ndarray,
                     pair: ResamplePair) -> np.ndarray:
    """Bicubic pre-upsample + forcing concat: (N, C, Hc, Wc) -> (N, C+1, H, W)."""
    up = bicubic_upsample(coarse_norm, pair)
    n = up.shape[0]
    forcing_b = np.broadcast_to(forcing, (n, 1) + pair.fine.shape)
    return np.concatenate([up, forcing_b], axis=1)


def train_regressor(
    coarse_norm: np.ndarray,
    fine_norm: np.ndarray,
    forcing: np.ndarray,
    pair: ResamplePair,
    model_config: RegressorConfig,
    train_config: TrainConfig,
    seed: int,
) -> tuple[Regressor, TrainResult]:
    """Minimize mean absolute error of the regressor on normalized pairs.

    Deterministic given seed (fixed batch order); aborts on non-finite loss.
    """
    model = Regressor(model_config)
    inputs = regressor_inputs(coarse_norm, forcing, pair)
    n = inputs.shape[0]
    order_rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    opt = AdamW(model.net.parameters(), train_config.optimizer)
    trace = np.empty(train_config.n_steps)
    perm = order_rng.permutation(n)
    pos = 0
    for step in range(train_config.n_steps):
        if pos + train_config.batch_size > n:
            perm = order_rng.permutation(n)
            pos = 0
        idx = perm[pos : pos + train_config.batch_size]
        pos += train_config.batch_size
        xb, tb = inputs[idx], fine_norm[idx]
        y, cache = model.net.forward(xb)
        diff = y - tb
        loss = float(np.mean(np.abs(diff)))
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite regressor loss at step {step}")
        dy = np.sign(diff) / diff.size
        model.net.backward(dy, cache)
        opt.step(lr_at(step, train_config.n_steps, train_config.optimizer))
        opt.zero_grad()
        trace[step] = loss
    return model, TrainResult(loss_trace=trace, n_steps=train_config.n_steps)


def regressor_sr(
    model: Regressor,
    coarse: FieldSet,
    forcing: np.ndarray,
    pair: ResamplePair,
    stats: NormStats,
) -> FieldSet:
    """Full inference path: normalize, bicubic pre-upsample, forward,
    denormalize; deterministic."""
    coarse_norm = normalize(coarse, stats)
    inputs = regressor_inputs(coarse_norm.data, forcing, pair)
    pred_norm = model(inputs)
    pred = FieldSet(
        data=pred_norm,
        channel_names=list(coarse.channel_names),
        grid=pair.fine,
        time_step_hours=coarse.time_step_hours,
        precip_channels=coarse.precip_channels,
    )
    return denormalize(pred, stats)

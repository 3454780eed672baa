"""Synthetic multiscale field generation, normalization, and the imperfect-
input perturbation.

Fields are Gaussian random field (GRF) time slices with a prescribed
band-limited power-law spectrum; slices are independent draws, so every
downstream diagnostic is a distributional statistic.  A designated channel can
be made precipitation-like (sparse, nonnegative) and is normalized through a
log1p transform instead of the plain mean/std scaling.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .grid import Grid, ResamplePair, coarsen
from .spectral import synthesize_gaussian, wavenumber_rfft2


@dataclass
class FieldSet:
    """time x channel x lat x lon physical values plus channel metadata."""

    data: np.ndarray
    channel_names: list[str]
    grid: Grid
    time_step_hours: float = 6.0
    precip_channels: tuple[int, ...] = ()

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 4:
            raise ValueError(f"FieldSet data must be 4-D (T,C,H,W), got {self.data.shape}")
        if self.data.shape[1] != len(self.channel_names):
            raise ValueError("channel_names length does not match data channels")
        if self.data.shape[2:] != self.grid.shape:
            raise ValueError(
                f"data spatial shape {self.data.shape[2:]} does not match grid {self.grid.shape}"
            )
        if not np.all(np.isfinite(self.data)):
            raise ValueError("FieldSet data contains non-finite values")

    @property
    def n_time(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class SpectrumSpec:
    """Isotropic band-limited power law: amplitude ~ k^(-alpha/2) on [k_min, k_max]."""

    alpha: float
    k_min: int
    k_max: int
    amplitude: float = 1.0

    def validate(self, grid: Grid) -> None:
        if self.alpha <= 0:
            raise ValueError(f"spectral exponent must be positive, got {self.alpha}")
        if not (1 <= self.k_min < self.k_max):
            raise ValueError(f"need 1 <= k_min < k_max, got [{self.k_min}, {self.k_max}]")
        if self.k_max > grid.n_lon // 2:
            raise ValueError(
                f"k_max={self.k_max} exceeds zonal Nyquist {grid.n_lon // 2} "
                f"for n_lon={grid.n_lon}"
            )


def grf_gain(grid: Grid, spec: SpectrumSpec) -> np.ndarray:
    """Per-mode synthesis gain (rfft2 layout): amplitude * k^(-alpha/2) in band."""
    k = wavenumber_rfft2(grid.n_lat, grid.n_lon)
    gain = spec.amplitude * np.where(k > 0, k, 1.0) ** (-spec.alpha / 2.0)
    gain[(k < spec.k_min) | (k > spec.k_max)] = 0.0
    return gain


def slice_rng(seed: int, index: int) -> np.random.Generator:
    """Independent per-slice stream derived from (seed, slice index)."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def generate_grf(grid: Grid, spec: SpectrumSpec, seed: int, n_time: int,
                 channel_name: str = "grf") -> FieldSet:
    """Zero-mean Gaussian random field slices with the prescribed spectrum.

    Slices are synthesized independently (per-slice derived seeds); the same
    (grid, spec, seed, n_time) always yields bit-identical output.
    """
    spec.validate(grid)
    gain = grf_gain(grid, spec)
    data = np.empty((n_time, 1, grid.n_lat, grid.n_lon))
    for t in range(n_time):
        data[t, 0] = synthesize_gaussian(gain, 1, slice_rng(seed, t), grid.shape)[0]
    return FieldSet(data=data, channel_names=[channel_name], grid=grid)


def make_precip_like(channel: np.ndarray, threshold: float) -> np.ndarray:
    """Pointwise max(x - threshold, 0): a sparse nonnegative channel."""
    return np.maximum(np.asarray(channel, dtype=float) - threshold, 0.0)


@dataclass(frozen=True)
class NormStats:
    """Per-channel normalization statistics, frozen over the training split.

    For precipitation-like channels mean/std are the statistics of
    log(1 + x/eps); for the rest they are plain physical mean/std.
    """

    mean: np.ndarray
    std: np.ndarray
    precip_mask: np.ndarray
    log_eps: float

    def __post_init__(self):
        if np.any(self.std <= 0):
            raise ValueError("normalization std must be positive for every channel")
        if self.log_eps <= 0:
            raise ValueError("precipitation log offset must be positive")


def compute_norm_stats(fields: FieldSet, eps_fraction: float = 0.01) -> NormStats:
    """Fit NormStats on a (training) FieldSet.

    The precipitation log offset defaults to eps_fraction of the raw precip
    channel standard deviation (pooled over precip channels).
    """
    c = fields.n_channels
    mask = np.zeros(c, dtype=bool)
    mask[list(fields.precip_channels)] = True
    eps = 1.0
    if mask.any():
        raw_std = float(fields.data[:, mask].std())
        eps = max(eps_fraction * raw_std, 1e-12)
    mean = np.empty(c)
    std = np.empty(c)
    for i in range(c):
        x = fields.data[:, i]
        if mask[i]:
            if np.any(x < 0):
                raise ValueError(f"precipitation channel {i} has negative values")
            x = np.log1p(x / eps)
        mean[i] = x.mean()
        s = x.std()
        if s <= 0:
            raise ValueError(f"channel {i} has zero variance; cannot normalize")
        std[i] = s
    return NormStats(mean=mean, std=std, precip_mask=mask, log_eps=eps)


def normalize(fields: FieldSet, stats: NormStats) -> FieldSet:
    """(x - mean)/std per channel; precip channels via log(1 + x/eps) first."""
    if stats.mean.shape[0] != fields.n_channels:
        raise ValueError("NormStats channel count does not match FieldSet")
    out = np.empty_like(fields.data)
    for i in range(fields.n_channels):
        x = fields.data[:, i]
        if stats.precip_mask[i]:
            if np.any(x < 0):
                raise ValueError(f"negative values in precipitation channel {i}")
            x = np.log1p(x / stats.log_eps)
        out[:, i] = (x - stats.mean[i]) / stats.std[i]
    return replace(fields, data=out)


def denormalize(fields: FieldSet, stats: NormStats) -> FieldSet:
    """Exact inverse of :func:`normalize`."""
    if stats.mean.shape[0] != fields.n_channels:
        raise ValueError("NormStats channel count does not match FieldSet")
    out = np.empty_like(fields.data)
    for i in range(fields.n_channels):
        x = fields.data[:, i] * stats.std[i] + stats.mean[i]
        if stats.precip_mask[i]:
            x = stats.log_eps * np.expm1(x)
        out[:, i] = x
    return replace(fields, data=out)


def build_pairs(fine: FieldSet, pair: ResamplePair) -> tuple[FieldSet, FieldSet]:
    """Coarsen a fine FieldSet channel-wise; returns (coarse, fine) aligned."""
    if fine.grid.shape != pair.fine.shape:
        raise ValueError(
            f"FieldSet grid {fine.grid.shape} does not match pair.fine {pair.fine.shape}"
        )
    coarse_data = coarsen(fine.data, pair)
    coarse = FieldSet(
        data=coarse_data,
        channel_names=list(fine.channel_names),
        grid=pair.coarse,
        time_step_hours=fine.time_step_hours,
        precip_channels=fine.precip_channels,
    )
    return coarse, fine


def perturb_imperfect(
    coarse: FieldSet,
    damping: Callable[[np.ndarray], np.ndarray],
    bias: float,
    seed: int,
    noise_amp: float = 0.0,
) -> FieldSet:
    """Emulator-drift stand-in: spectral damping + constant bias + weak noise.

    damping maps the per-mode wavenumber array to multiplicative factors in
    (0, 1]; it is applied to every channel and time slice, then the bias and
    (optionally) white Gaussian noise are added.  Deterministic given seed.
    """
    k = wavenumber_rfft2(coarse.grid.n_lat, coarse.grid.n_lon)
    gain = np.asarray(damping(k), dtype=float)
    if gain.shape != k.shape:
        raise ValueError("damping function must return one factor per mode")
    if np.any(gain <= 0) or np.any(gain > 1):
        raise ValueError("damping factors must lie in (0, 1]")
    spec = np.fft.rfft2(coarse.data, norm="ortho")
    out = np.fft.irfft2(spec * gain, s=coarse.grid.shape, norm="ortho") + bias
    if noise_amp > 0:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E27]))
        out = out + noise_amp * rng.standard_normal(out.shape)
    return replace(coarse, data=out)

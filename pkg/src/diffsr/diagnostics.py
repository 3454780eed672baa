"""Climatological evaluation battery: quadrature-weighted RMSE and temporal
standard deviation, zonal climatology profiles, zonal power spectra, pooled
PDFs with tail quantiles, latitude-weighted EOF analysis, and regional crops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Grid, weighted_mean
from .synthdata import FieldSet


def _check_aligned(pred: FieldSet, truth: FieldSet) -> None:
    if pred.data.shape != truth.data.shape:
        raise ValueError(
            f"prediction shape {pred.data.shape} != truth shape {truth.data.shape}"
        )


def weighted_rmse(pred: FieldSet, truth: FieldSet) -> np.ndarray:
    """Climatological weighted RMSE per channel: time-mean fields first, then
    the area-weighted spatial RMSE of their difference."""
    _check_aligned(pred, truth)
    err = pred.data.mean(axis=0) - truth.data.mean(axis=0)
    return np.sqrt(weighted_mean(err**2, pred.grid))


def weighted_rmse_per_step(pred: FieldSet, truth: FieldSet) -> np.ndarray:
    """Mean over time of the per-timestep weighted spatial RMSE, per channel."""
    _check_aligned(pred, truth)
    err2 = (pred.data - truth.data) ** 2
    return np.sqrt(weighted_mean(err2, pred.grid)).mean(axis=0)


def temporal_std(fields: FieldSet) -> np.ndarray:
    """Per-cell std over time (population convention), spatially averaged."""
    if fields.n_time < 2:
        raise ValueError("temporal_std requires at least 2 time slices")
    std_map = fields.data.std(axis=0)
    return weighted_mean(std_map, fields.grid)


def zonal_climatology(fields: FieldSet, ensemble: list[FieldSet] | None = None):
    """Time-mean then longitude-mean per latitude row: (C, n_lat) profiles.

    With an ensemble, also returns the across-member std profile (spread band).
    """
    prof = fields.data.mean(axis=(0, 3))
    if ensemble is None:
        return prof
    member_profs = np.stack([m.data.mean(axis=(0, 3)) for m in ensemble])
    return member_profs.mean(axis=0), member_profs.std(axis=0)


@dataclass(frozen=True)
class SpectrumResult:
    wavenumbers: np.ndarray  # 0 .. n_lon/2
    power: np.ndarray  # (C, n_lon/2 + 1), row-weighted and time-averaged

    def __post_init__(self):
        if np.any(self.power < 0):
            raise ValueError("spectral power must be nonnegative")


def zonal_spectrum(fields: FieldSet) -> SpectrumResult:
    """One-sided zonal power spectrum averaged over latitude (weighted) and time.

    Normalized so that sum_k power(k) equals the weighted mean of the per-row
    mean square (Parseval).
    """
    n_lon = fields.grid.n_lon
    if n_lon < 8:
        raise ValueError("zonal_spectrum requires n_lon >= 8")
    coeffs = np.fft.rfft(fields.data, axis=-1) / n_lon
    power = np.abs(coeffs) ** 2
    power[..., 1:-1] *= 2.0  # fold conjugate modes; DC and Nyquist stay single
    if n_lon % 2 != 0:
        power[..., -1] *= 2.0
    w = fields.grid.row_weights
    mean_rows = np.einsum("tchk,h->ck", power, w) / w.sum()
    mean_rows = mean_rows / fields.n_time
    return SpectrumResult(wavenumbers=np.arange(power.shape[-1]), power=mean_rows)


def band_power_ratio(pred: SpectrumResult, truth: SpectrumResult,
                     k_min: float, k_max: float | None = None) -> np.ndarray:
    """Per-channel ratio of summed band power, prediction over truth."""
    k = truth.wavenumbers
    sel = k >= k_min
    if k_max is not None:
        sel &= k <= k_max
    return pred.power[:, sel].sum(axis=1) / truth.power[:, sel].sum(axis=1)


def weighted_quantile(values: np.ndarray, weights: np.ndarray, q) -> np.ndarray:
    """Weighted quantile by interpolation of the weighted empirical CDF."""
    order = np.argsort(values, kind="stable")
    v = values[order]
    w = weights[order]
    cdf = np.cumsum(w) - 0.5 * w
    cdf /= w.sum()
    return np.interp(np.asarray(q, dtype=float), cdf, v)


@dataclass(frozen=True)
class PdfResult:
    bin_edges: np.ndarray  # (C, bins + 1)
    density: np.ndarray  # (C, bins), integrates to 1 per channel
    q_low: np.ndarray  # (C,) 0.1% tail quantile
    q_high: np.ndarray  # (C,) 99.9% tail quantile


def pdf(fields: FieldSet, bins: int = 64,
        value_range: np.ndarray | None = None) -> PdfResult:
    """Pooled-cell PDF per channel, weighted by latitude row weights.

    value_range is (C, 2); when omitted it defaults to the dataset's
    [0.05%, 99.95%] weighted quantiles (share the truth's range across models
    for comparability).
    """
    if bins < 8:
        raise ValueError("pdf requires at least 8 bins")
    t, c, h, w = fields.data.shape
    cell_w = np.broadcast_to(
        fields.grid.row_weights[:, None], (h, w)
    )
    pooled_w = np.broadcast_to(cell_w, (t, h, w)).reshape(-1)
    edges = np.empty((c, bins + 1))
    dens = np.empty((c, bins))
    q_lo = np.empty(c)
    q_hi = np.empty(c)
    for ci in range(c):
        x = fields.data[:, ci].reshape(-1)
        if value_range is not None:
            lo, hi = float(value_range[ci, 0]), float(value_range[ci, 1])
        else:
            lo, hi = weighted_quantile(x, pooled_w, [0.0005, 0.9995])
        if not hi > lo:
            raise ValueError(f"empty histogram range for channel {ci}: [{lo}, {hi}]")
        dens[ci], edges[ci] = np.histogram(
            x, bins=bins, range=(lo, hi), weights=pooled_w, density=True
        )
        q_lo[ci], q_hi[ci] = weighted_quantile(x, pooled_w, [0.001, 0.999])
    return PdfResult(bin_edges=edges, density=dens, q_low=q_lo, q_high=q_hi)


def default_pdf_range(fields: FieldSet) -> np.ndarray:
    """(C, 2) [0.05%, 99.95%] weighted quantiles, for sharing across models."""
    t, c, h, w = fields.data.shape
    pooled_w = np.broadcast_to(
        fields.grid.row_weights[:, None], (t, h, w)
    ).reshape(-1)
    out = np.empty((c, 2))
    for ci in range(c):
        out[ci] = weighted_quantile(
            fields.data[:, ci].reshape(-1), pooled_w, [0.0005, 0.9995]
        )
    return out


@dataclass(frozen=True)
class EofResult:
    patterns: np.ndarray  # (n_modes, n_lat, n_lon), unweighted, sign-fixed
    explained: np.ndarray  # (n_modes,) fractions of total weighted variance
    pcs: np.ndarray  # (n_time, n_modes) principal-component series

    def __post_init__(self):
        if np.any(self.explained < 0) or self.explained.sum() > 1 + 1e-9:
            raise ValueError("explained fractions must lie in [0, 1] and sum <= 1")
        if np.any(np.diff(self.explained) > 1e-12):
            raise ValueError("explained fractions must be non-increasing")


def eof(channel: np.ndarray, grid: Grid, n_modes: int) -> EofResult:
    """EOF analysis of one channel (T, n_lat, n_lon) with sqrt(row-weight)
    latitude scaling (the sqrt(cos lat) convention).

    Patterns are returned in unweighted physical units with the
    largest-magnitude element positive; modes are orthonormal under the
    weighted inner product.
    """
    t = channel.shape[0]
    if t <= n_modes:
        raise ValueError(f"need more time slices ({t}) than modes ({n_modes})")
    anom = channel - channel.mean(axis=0)
    sw = np.sqrt(grid.row_weights)[None, :, None]
    x = (anom * sw).reshape(t, -1)
    total = float(np.sum(x**2))
    if total <= 0:
        raise ValueError("zero-variance input: EOF analysis is degenerate")
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    explained = (s[:n_modes] ** 2) / (s**2).sum()
    patterns_w = vt[:n_modes].reshape(n_modes, grid.n_lat, grid.n_lon)
    pcs = u[:, :n_modes] * s[None, :n_modes]
    for m in range(n_modes):
        peak = np.unravel_index(np.argmax(np.abs(patterns_w[m])), patterns_w[m].shape)
        if patterns_w[m][peak] < 0:
            patterns_w[m] = -patterns_w[m]
            pcs[:, m] = -pcs[:, m]
    patterns = patterns_w / sw[0]
    return EofResult(patterns=patterns, explained=explained, pcs=pcs)


def eof_weighted_patterns(result: EofResult, grid: Grid) -> np.ndarray:
    """Re-apply the sqrt(weight) scaling (the orthonormal representation)."""
    return result.patterns * np.sqrt(grid.row_weights)[None, :, None]


def region_crop(
    fields: FieldSet,
    lat_range: tuple[float, float],
    lon_range: tuple[float, float],
    time_mask: np.ndarray | None = None,
) -> FieldSet:
    """Crop to a lat/lon box (lon may wrap across 360) with renormalized row
    weights; optionally subset time slices (seasonal index masks)."""
    lat_lo, lat_hi = min(lat_range), max(lat_range)
    lat_sel = (fields.grid.lat_centers >= lat_lo) & (fields.grid.lat_centers <= lat_hi)
    lon = fields.grid.lon_centers
    lo, hi = lon_range
    if lo <= hi:
        lon_sel = (lon >= lo) & (lon <= hi)
    else:
        lon_sel = (lon >= lo) | (lon <= hi)
    if not lat_sel.any() or not lon_sel.any():
        raise ValueError(
            f"crop lat={lat_range} lon={lon_range} does not intersect the grid"
        )
    w = fields.grid.row_weights[lat_sel]
    sub_grid = Grid(
        n_lat=int(lat_sel.sum()),
        n_lon=int(lon_sel.sum()),
        lat_centers=fields.grid.lat_centers[lat_sel],
        lon_centers=lon[lon_sel],
        row_weights=w / w.sum(),
    )
    data = fields.data[:, :, lat_sel][:, :, :, lon_sel]
    if time_mask is not None:
        data = data[np.asarray(time_mask, dtype=bool)]
    return FieldSet(
        data=data,
        channel_names=list(fields.channel_names),
        grid=sub_grid,
        time_step_hours=fields.time_step_hours,
        precip_channels=fields.precip_channels,
    )


def time_mean_map(fields: FieldSet, time_mask: np.ndarray | None = None) -> np.ndarray:
    """Climatological (C, H, W) mean map, optionally over a seasonal subset."""
    data = fields.data
    if time_mask is not None:
        data = data[np.asarray(time_mask, dtype=bool)]
        if data.shape[0] == 0:
            raise ValueError("time_mask selects no slices")
    return data.mean(axis=0)


# ---------------------------------------------------------------------------
# Metrics report
# ---------------------------------------------------------------------------

METRICS_SCHEMA = "diffsr-metrics-1"


@dataclass
class MetricsReport:
    """Per-model evaluation summary; one row per metric and channel."""

    model: str
    config_hash: str
    seed: int
    channel_names: list[str]
    rmse_clim: np.ndarray
    rmse_per_step: np.ndarray
    temporal_std_pred: np.ndarray
    temporal_std_truth: np.ndarray
    highband_ratio: np.ndarray
    pdf_q_low: np.ndarray
    pdf_q_high: np.ndarray
    eof1_explained: float

    def __post_init__(self):
        for name in ("rmse_clim", "rmse_per_step", "temporal_std_pred",
                     "temporal_std_truth", "highband_ratio", "pdf_q_low",
                     "pdf_q_high"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite metric values in {name}")

    def rows(self) -> list[tuple[str, str, str, float]]:
        out = []
        per_channel = [
            ("rmse_clim", self.rmse_clim),
            ("rmse_per_step", self.rmse_per_step),
            ("temporal_std", self.temporal_std_pred),
            ("temporal_std_truth", self.temporal_std_truth),
            ("highband_power_ratio", self.highband_ratio),
            ("pdf_q001", self.pdf_q_low),
            ("pdf_q999", self.pdf_q_high),
        ]
        for metric, values in per_channel:
            for ci, ch in enumerate(self.channel_names):
                out.append((self.model, ch, metric, float(values[ci])))
        out.append((self.model, "*", "eof1_explained", float(self.eof1_explained)))
        return out

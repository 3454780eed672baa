"""Lat-lon raster geometry, quadrature weights, and resolution-change operators.

The grid is cell-centered equiangular: latitude rows ordered north to south,
longitudes periodic on [0, 360).  Row weights are proportional to cos(lat) and
normalized to sum to one; they back every area-weighted statistic.  A
:class:`ResamplePair` owns the geometry shared by the two deterministic
resolution-change operators:

* :func:`coarsen` - weighted block mean (the linear measurement operator),
* :func:`bicubic_upsample` - separable cubic convolution (Catmull-Rom, a=-1/2)
  with periodic wraparound in longitude and edge clamping in latitude.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels


@dataclass(frozen=True, eq=False)
class Grid:
    n_lat: int
    n_lon: int
    lat_centers: np.ndarray  # degrees, strictly north -> south
    lon_centers: np.ndarray  # degrees in [0, 360), uniform spacing
    row_weights: np.ndarray  # positive, sums to 1

    def __post_init__(self):
        # Full periodic grids are built through make_latlon_grid, which
        # enforces the stricter sizing rules; regional crops relax them.
        if self.n_lat < 1 or self.n_lon < 1:
            raise ValueError(f"empty grid ({self.n_lat}, {self.n_lon})")
        if np.any(self.row_weights <= 0):
            raise ValueError("row_weights must be strictly positive")
        if not np.isclose(self.row_weights.sum(), 1.0, atol=1e-12):
            raise ValueError("row_weights must sum to 1")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_lat, self.n_lon)


def make_latlon_grid(n_lat: int, n_lon: int) -> Grid:
    """Build a cell-centered equiangular grid with cos(lat) row weights."""
    if n_lat < 2 or n_lon < 4 or n_lon % 2 != 0:
        raise ValueError(
            f"invalid grid size ({n_lat}, {n_lon}): need n_lat >= 2, "
            f"n_lon >= 4 and n_lon even"
        )
    lat = 90.0 - (np.arange(n_lat) + 0.5) * (180.0 / n_lat)
    lon = (np.arange(n_lon) + 0.5) * (360.0 / n_lon)
    w = np.cos(np.deg2rad(lat))
    w = w / w.sum()
    return Grid(n_lat=n_lat, n_lon=n_lon, lat_centers=lat, lon_centers=lon, row_weights=w)


# ---------------------------------------------------------------------------
# Cubic convolution kernel (Catmull-Rom, a = -1/2)
# ---------------------------------------------------------------------------


def cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel evaluated at distance |t|."""
    t = np.abs(np.asarray(t, dtype=float))
    near = (a + 2.0) * t**3 - (a + 3.0) * t**2 + 1.0
    far = a * t**3 - 5.0 * a * t**2 + 8.0 * a * t - 4.0 * a
    out = np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))
    return out


def _bicubic_stencil(n_src: int, factor: int, periodic: bool):
    """Per-destination 4-tap indices/weights for cell-centered upsampling."""
    n_dst = n_src * factor
    u = (np.arange(n_dst) + 0.5) / factor - 0.5
    j0 = np.floor(u).astype(np.int64)
    t = u - j0
    offsets = np.array([-1, 0, 1, 2])
    idx = j0[:, None] + offsets[None, :]
    w = cubic_kernel(t[:, None] - offsets[None, :])
    if periodic:
        idx = np.mod(idx, n_src)
    else:
        idx = np.clip(idx, 0, n_src - 1)
    return np.ascontiguousarray(idx), np.ascontiguousarray(w)


# ---------------------------------------------------------------------------
# Resampling pair
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ResamplePair:
    fine: Grid
    coarse: Grid
    factor: int
    # derived geometry, built once in make_resample_pair
    block_weights: np.ndarray = field(repr=False, default=None)  # (n_lat_c, factor)
    up_idx_lat: np.ndarray = field(repr=False, default=None)
    up_w_lat: np.ndarray = field(repr=False, default=None)
    up_idx_lon: np.ndarray = field(repr=False, default=None)
    up_w_lon: np.ndarray = field(repr=False, default=None)


def make_resample_pair(fine: Grid, factor: int) -> ResamplePair:
    """Pair a fine grid with its integer-factor coarse counterpart."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if fine.n_lat % factor or fine.n_lon % factor:
        raise ValueError(
            f"fine grid {fine.shape} is not an exact multiple of factor {factor}"
        )
    coarse = make_latlon_grid(fine.n_lat // factor, fine.n_lon // factor)
    wf = fine.row_weights.reshape(coarse.n_lat, factor)
    block_w = wf / (factor * wf.sum(axis=1, keepdims=True))
    idx_lat, w_lat = _bicubic_stencil(coarse.n_lat, factor, periodic=False)
    idx_lon, w_lon = _bicubic_stencil(coarse.n_lon, factor, periodic=True)
    return ResamplePair(
        fine=fine,
        coarse=coarse,
        factor=factor,
        block_weights=block_w,
        up_idx_lat=idx_lat,
        up_w_lat=w_lat,
        up_idx_lon=idx_lon,
        up_w_lon=w_lon,
    )


def _check_trailing(field_arr: np.ndarray, grid: Grid, what: str) -> None:
    if field_arr.shape[-2:] != grid.shape:
        raise ValueError(
            f"{what}: trailing dimensions {field_arr.shape[-2:]} do not match "
            f"grid {grid.shape}"
        )


def coarsen(field_arr: np.ndarray, pair: ResamplePair) -> np.ndarray:
    """Weighted block mean from the fine grid to the coarse grid.

    Each coarse cell averages its factor x factor fine block with the fine row
    weights renormalized per block; linear and mean-conserving.
    """
    _check_trailing(field_arr, pair.fine, "coarsen")
    return kernels.block_mean(np.asarray(field_arr, dtype=float), pair.factor, pair.block_weights)


def coarsen_adjoint(coarse_arr: np.ndarray, pair: ResamplePair) -> np.ndarray:
    """Adjoint of :func:`coarsen` under plain (unweighted) dot products."""
    _check_trailing(coarse_arr, pair.coarse, "coarsen_adjoint")
    return kernels.block_spread(np.asarray(coarse_arr, dtype=float), pair.factor, pair.block_weights)


def bicubic_upsample(field_arr: np.ndarray, pair: ResamplePair) -> np.ndarray:
    """Separable Catmull-Rom upsampling from the coarse grid to the fine grid."""
    _check_trailing(field_arr, pair.coarse, "bicubic_upsample")
    return kernels.apply_separable(
        np.asarray(field_arr, dtype=float),
        pair.up_idx_lat,
        pair.up_w_lat,
        pair.up_idx_lon,
        pair.up_w_lon,
        pair.coarse.n_lat,
        pair.coarse.n_lon,
    )


def weighted_mean(field_arr: np.ndarray, grid: Grid) -> float | np.ndarray:
    """Area-weighted spatial mean; reduces the trailing (lat, lon) axes."""
    _check_trailing(field_arr, grid, "weighted_mean")
    w = grid.row_weights
    num = np.einsum("...ij,i->...", np.asarray(field_arr, dtype=float), w)
    out = num / (grid.n_lon * w.sum())
    return float(out) if np.ndim(out) == 0 else out

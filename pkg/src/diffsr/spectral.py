"""2-D spectral helpers shared by the field generator, the Gaussian prior,
and the diagnostics.

Conventions: all transforms use ``norm="ortho"`` so that white physical noise
has unit expected power per stored mode.  The scalar wavenumber attached to a
2-D mode is the zonal-equivalent integer wavenumber

    k = hypot(kx, ky * n_lon / n_lat)

which maps meridional structure onto the same angular scale as zonal structure
(the latitude span is half the longitude span).
"""

from __future__ import annotations

import numpy as np


def wavenumber_rfft2(n_lat: int, n_lon: int) -> np.ndarray:
    """Zonal-equivalent wavenumber on the rfft2 layout (n_lat, n_lon//2+1)."""
    ky = np.fft.fftfreq(n_lat) * n_lat
    kx = np.fft.rfftfreq(n_lon) * n_lon
    return np.hypot(kx[None, :], ky[:, None] * (n_lon / n_lat))


def wavenumber_fft2(n_lat: int, n_lon: int) -> np.ndarray:
    """Zonal-equivalent wavenumber on the full fft2 layout (n_lat, n_lon)."""
    ky = np.fft.fftfreq(n_lat) * n_lat
    kx = np.fft.fftfreq(n_lon) * n_lon
    return np.hypot(kx[None, :], ky[:, None] * (n_lon / n_lat))


def filter_rfft2(fields: np.ndarray, gain: np.ndarray) -> np.ndarray:
    """Multiply the rfft2 coefficients of real fields by a real gain map."""
    h, w = fields.shape[-2:]
    spec = np.fft.rfft2(fields, norm="ortho")
    return np.fft.irfft2(spec * gain, s=(h, w), norm="ortho")


def synthesize_gaussian(gain: np.ndarray, n: int, rng: np.random.Generator,
                        shape: tuple[int, int]) -> np.ndarray:
    """Draw n real Gaussian fields whose per-mode std is the given rfft2 gain."""
    white = rng.standard_normal((n,) + shape)
    return filter_rfft2(white, gain)


def mode_power(fields: np.ndarray) -> np.ndarray:
    """Per-mode power |fft2|^2 on the full layout, ortho-normalized."""
    return np.abs(np.fft.fft2(fields, norm="ortho")) ** 2


def unit_shells(k_max: float) -> list[tuple[float, float]]:
    """Unit-width wavenumber shells [m, m+1) for m = 1 .. floor(k_max)."""
    return [(float(m), float(m + 1)) for m in range(1, int(np.floor(k_max)) + 1)]


def band_average(values: np.ndarray, k: np.ndarray,
                 bands: list[tuple[float, float]]) -> tuple[np.ndarray, np.ndarray]:
    """Average a per-mode map over wavenumber bands.

    values has trailing shape equal to k's; returns (band means with trailing
    axis len(bands), mode counts per band).
    """
    lead = values.shape[: values.ndim - k.ndim]
    flat = values.reshape(lead + (-1,))
    kf = k.reshape(-1)
    means = np.full(lead + (len(bands),), np.nan)
    counts = np.zeros(len(bands), dtype=int)
    for b, (lo, hi) in enumerate(bands):
        sel = (kf >= lo) & (kf < hi)
        counts[b] = int(sel.sum())
        if counts[b]:
            means[..., b] = flat[..., sel].mean(axis=-1)
    return means, counts

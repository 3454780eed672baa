"""Gaussian field priors and the closed-form analytic denoiser.

A :class:`GaussianPrior` is diagonal in the 2-D Fourier basis: per-mode
variances c_k (rfft2 layout, ortho convention) around a mean field.  For such
a prior the posterior expectation of the clean field given a noisy observation
x = x0 + sigma * n is exact per mode:

    xhat_k = mu_k + c_k / (c_k + sigma^2) * (x_k - mu_k)

which realizes the denoiser contract without training and anchors every
sampler/guidance correctness test.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Grid
from .spectral import filter_rfft2, synthesize_gaussian, wavenumber_rfft2
from .synthdata import SpectrumSpec, grf_gain


@dataclass(frozen=True, eq=False)
class GaussianPrior:
    grid: Grid
    spectrum: np.ndarray  # (n_lat, n_lon//2 + 1) per-mode variance, >= 0
    mean: np.ndarray | None = None  # (n_lat, n_lon) physical mean field

    def __post_init__(self):
        expect = (self.grid.n_lat, self.grid.n_lon // 2 + 1)
        if self.spectrum.shape != expect:
            raise ValueError(f"spectrum shape {self.spectrum.shape} != rfft2 layout {expect}")
        if np.any(self.spectrum < 0):
            raise ValueError("per-mode variances must be nonnegative")
        if self.mean is not None and self.mean.shape != self.grid.shape:
            raise ValueError("mean field shape does not match grid")


def power_law_prior(grid: Grid, spec: SpectrumSpec, mean: np.ndarray | None = None) -> GaussianPrior:
    """Band-limited power-law prior matching the GRF generator's spectrum."""
    gain = grf_gain(grid, spec)
    return GaussianPrior(grid=grid, spectrum=gain**2, mean=mean)


def full_support_power_law_prior(grid: Grid, alpha: float, amplitude: float = 1.0,
                                 mean: np.ndarray | None = None) -> GaussianPrior:
    """Full-rank power law c_k = amplitude^2 * max(k, 1)^(-alpha) on every mode."""
    k = wavenumber_rfft2(grid.n_lat, grid.n_lon)
    c = amplitude**2 * np.maximum(k, 1.0) ** (-alpha)
    return GaussianPrior(grid=grid, spectrum=c, mean=mean)


def sample_prior(prior: GaussianPrior, n: int, seed: int) -> np.ndarray:
    """Draw n fields from the prior; deterministic given seed."""
    rng = np.random.default_rng(seed)
    x = synthesize_gaussian(np.sqrt(prior.spectrum), n, rng, prior.grid.shape)
    if prior.mean is not None:
        x = x + prior.mean
    return x


def prior_score(prior: GaussianPrior, x: np.ndarray) -> np.ndarray:
    """Exact grad_x log p(x) for a full-rank prior (used by oracle tests)."""
    if np.any(prior.spectrum <= 0):
        raise ValueError("prior_score requires a full-rank prior (all c_k > 0)")
    anom = x - prior.mean if prior.mean is not None else x
    return -filter_rfft2(anom, 1.0 / prior.spectrum)


def noisy_score(prior: GaussianPrior, x: np.ndarray, sigma: float) -> np.ndarray:
    """Exact grad_x log p_sigma(x) where p_sigma = prior convolved with N(0, sigma^2 I)."""
    anom = x - prior.mean if prior.mean is not None else x
    return -filter_rfft2(anom, 1.0 / (prior.spectrum + sigma**2))


class AnalyticGaussianDenoiser:
    """Closed-form D(x; sigma) for a Gaussian prior; linear and self-adjoint."""

    def __init__(self, prior: GaussianPrior):
        self.prior = prior

    def _gain(self, sigma: float) -> np.ndarray:
        c = self.prior.spectrum
        if sigma == 0:
            return np.ones_like(c)
        return c / (c + sigma**2)

    def __call__(self, x: np.ndarray, sigma, cond=None) -> np.ndarray:
        if x.shape[-2:] != self.prior.grid.shape:
            raise ValueError(
                f"field shape {x.shape[-2:]} does not match prior grid {self.prior.grid.shape}"
            )
        sigma = float(np.asarray(sigma).reshape(-1)[0]) if np.ndim(sigma) else float(sigma)
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        mu = self.prior.mean
        anom = x - mu if mu is not None else x
        out = filter_rfft2(anom, self._gain(sigma))
        return out + mu if mu is not None else out

    def vjp(self, x: np.ndarray, sigma, v: np.ndarray, cond=None) -> np.ndarray:
        """J_D^T v; the Jacobian is the (symmetric) shrinkage filter itself."""
        sigma = float(np.asarray(sigma).reshape(-1)[0]) if np.ndim(sigma) else float(sigma)
        return filter_rfft2(v, self._gain(sigma))


def prior_band_spectrum(prior: GaussianPrior, bands) -> tuple[np.ndarray, np.ndarray]:
    """Exact per-band mean mode power of the prior (full fft2 mode counting)."""
    from .spectral import band_average, wavenumber_fft2

    h, w = prior.grid.shape
    # Map the rfft2 variance map onto the full fft2 layout via conjugate symmetry.
    full = np.empty((h, w))
    half = prior.spectrum
    full[:, : w // 2 + 1] = half
    conj_rows = (-np.arange(h)) % h
    for j in range(w // 2 + 1, w):
        full[:, j] = half[conj_rows, w - j]
    k = wavenumber_fft2(h, w)
    return band_average(full, k, bands)

"""EDM noise parameterization, preconditioning, weighted loss, and the
deterministic Heun probability-flow-ODE sampler.

The corruption model is x(sigma) = x0 + sigma * n.  The denoiser contract is
D(x, sigma[, cond]) -> clean estimate; the sampler integrates

    dx/dsigma = (x - D(x; sigma)) / sigma

from sigma_max down to 0 over the Karras ladder with Heun's method (plain
Euler on the final step, where the drift is undefined at sigma = 0).  With a
guidance configuration the drift gains the posterior term of
:func:`diffsr.guidance.posterior_drift`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Sigma discretization plus the training-time sigma distribution."""

    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    n_steps: int = 40
    sigma_data: float = 1.2
    p_mean: float = 0.0
    p_std: float = 2.0

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise ValueError(
                f"need 0 < sigma_min < sigma_max, got ({self.sigma_min}, {self.sigma_max})"
            )
        if self.n_steps < 2:
            raise ValueError(f"n_steps must be >= 2, got {self.n_steps}")
        if self.sigma_data <= 0:
            raise ValueError(f"sigma_data must be positive, got {self.sigma_data}")
        if self.p_std <= 0:
            raise ValueError(f"p_std must be positive, got {self.p_std}")


@dataclass(frozen=True)
class PreconditionCoeffs:
    c_skip: np.ndarray
    c_out: np.ndarray
    c_in: np.ndarray
    c_noise: np.ndarray


def precondition_coeffs(sigma, sigma_data: float) -> PreconditionCoeffs:
    """Karras preconditioning: keeps network input/output at unit variance."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0) or sigma_data <= 0:
        raise ValueError("precondition_coeffs requires sigma > 0 and sigma_data > 0")
    s2 = sigma**2 + sigma_data**2
    return PreconditionCoeffs(
        c_skip=sigma_data**2 / s2,
        c_out=sigma * sigma_data / np.sqrt(s2),
        c_in=1.0 / np.sqrt(s2),
        c_noise=np.log(sigma) / 4.0,
    )


def loss_weight(sigma, sigma_data: float):
    """lambda(sigma) = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2."""
    sigma = np.asarray(sigma, dtype=float)
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


def add_noise(x0: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """x0 + sigma * n with standard normal n, deterministic given seed."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    rng = np.random.default_rng(seed)
    return x0 + sigma * rng.standard_normal(x0.shape)


def sample_training_sigma(schedule: NoiseSchedule, seed: int, size=None):
    """Log-normal training sigma: sigma = exp(z), z ~ N(p_mean, p_std^2)."""
    rng = np.random.default_rng(seed)
    z = rng.normal(schedule.p_mean, schedule.p_std, size=size)
    return np.exp(z)


def karras_sigmas(schedule: NoiseSchedule) -> np.ndarray:
    """Descending sigma ladder with the rho-warped spacing, plus terminal 0."""
    n = schedule.n_steps
    i = np.arange(n)
    inv_rho = 1.0 / schedule.rho
    s = (
        schedule.sigma_max**inv_rho
        + (i / (n - 1)) * (schedule.sigma_min**inv_rho - schedule.sigma_max**inv_rho)
    ) ** schedule.rho
    return np.concatenate([s, [0.0]])


def edm_loss(denoiser, x0: np.ndarray, schedule: NoiseSchedule, seed: int,
             cond: np.ndarray | None = None) -> float:
    """Monte-Carlo EDM objective E[lambda(sigma) ||D(x0 + sigma n; sigma) - x0||^2].

    x0 is a normalized (B, C, H, W) batch; sigma is drawn per batch element
    from the schedule's log-normal; the mean runs over batch and elements.
    """
    rng = np.random.default_rng(seed)
    b = x0.shape[0]
    sigma = np.exp(rng.normal(schedule.p_mean, schedule.p_std, size=b))
    noise = rng.standard_normal(x0.shape)
    x_noisy = x0 + sigma[:, None, None, None] * noise
    d = denoiser(x_noisy, sigma, cond) if cond is not None else denoiser(x_noisy, sigma)
    if d.shape != x0.shape:
        raise ValueError(f"denoiser output shape {d.shape} != input shape {x0.shape}")
    lam = loss_weight(sigma, schedule.sigma_data)
    return float(np.mean(lam[:, None, None, None] * (d - x0) ** 2))


def pf_ode_sample(
    denoiser,
    schedule: NoiseSchedule,
    shape: tuple[int, ...],
    seed: int,
    guidance=None,
    y: np.ndarray | None = None,
    cond: np.ndarray | None = None,
    return_residuals: bool = False,
    x_init: np.ndarray | None = None,
):
    """Deterministic Heun integration of the probability-flow ODE.

    Initializes x ~ N(0, sigma_max^2 I) of the given shape (or continues from
    a supplied x_init) and integrates to sigma = 0.  When a guidance config
    (and observation y) is supplied the drift is the guided posterior drift at
    both Heun stages; per-step measurement residuals ||y - M(D(x; sigma))||_rms
    can be recorded.
    """
    if guidance is not None and y is None:
        raise ValueError("guided sampling requires an observation y")
    if guidance is not None:
        from .guidance import posterior_drift

    sigmas = karras_sigmas(schedule)
    if x_init is None:
        rng = np.random.default_rng(seed)
        x = schedule.sigma_max * rng.standard_normal(shape)
    else:
        if x_init.shape != tuple(shape):
            raise ValueError(f"x_init shape {x_init.shape} != requested {tuple(shape)}")
        x = np.array(x_init, dtype=float)
    residuals = []

    def drift(xc, sigma, record=False):
        if guidance is None:
            d_hat = denoiser(xc, sigma, cond) if cond is not None else denoiser(xc, sigma)
            return (xc - d_hat) / sigma
        d, res = posterior_drift(xc, sigma, y, denoiser, guidance, cond=cond,
                                 return_residual=True)
        if record:
            residuals.append(res)
        return d

    n = len(sigmas) - 1
    for i in range(n):
        s_cur, s_next = sigmas[i], sigmas[i + 1]
        d_cur = drift(x, s_cur, record=return_residuals)
        x_pred = x + (s_next - s_cur) * d_cur
        if s_next == 0.0:
            x = x_pred
        else:
            d_next = drift(x_pred, s_next)
            x = x + (s_next - s_cur) * 0.5 * (d_cur + d_next)
        if not np.all(np.isfinite(x)):
            extra = f", lambda_g={guidance.lambda_g}" if guidance is not None else ""
            raise FloatingPointError(
                f"non-finite state after sampler step {i} (sigma {s_cur:.4g} -> "
                f"{s_next:.4g}{extra})"
            )
    if return_residuals:
        return x, np.asarray(residuals)
    return x

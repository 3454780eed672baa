"""Trainable convolutional denoiser: preconditioning wrapper, conditional
input assembly, and the deterministic training loop.

The exposed denoiser satisfies

    D(x; sigma[, cond]) = c_skip(sigma) * x
                          + c_out(sigma) * F_theta(c_in(sigma) * x [, cond]; c_noise)

so that at sigma -> 0 it approaches the identity regardless of the network,
and an untrained (zero-output) network yields D = c_skip * x exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .edm import NoiseSchedule, loss_weight, precondition_coeffs
from .grid import ResamplePair, bicubic_upsample
from .nn import AdamW, DenoiserUNet, OptimizerConfig, lr_at


@dataclass(frozen=True)
class ConvDenoiserConfig:
    n_channels: int
    n_cond_channels: int = 0
    base_width: int = 16
    channel_mults: tuple[int, ...] = (1, 2, 4)
    blocks_per_level: int = 2
    emb_dim: int = 64
    groups_cap: int = 8
    sigma_data: float = 1.2
    seed: int = 0

    def __post_init__(self):
        if self.n_channels < 1 or self.n_cond_channels < 0:
            raise ValueError("invalid channel counts")
        if self.base_width < 1 or not self.channel_mults:
            raise ValueError("invalid width configuration")


class ConvDenoiser:
    """Preconditioned trainable denoiser implementing D(x, sigma[, cond])."""

    def __init__(self, config: ConvDenoiserConfig):
        self.config = config
        self.net = DenoiserUNet(
            c_in=config.n_channels + config.n_cond_channels,
            c_out=config.n_channels,
            base_width=config.base_width,
            channel_mults=config.channel_mults,
            blocks_per_level=config.blocks_per_level,
            emb_dim=config.emb_dim,
            groups_cap=config.groups_cap,
            seed=config.seed,
        )

    @property
    def n_params(self) -> int:
        return self.net.n_params()

    def check_grid(self, shape: tuple[int, int]) -> None:
        div = 2 ** (len(self.config.channel_mults) - 1)
        if shape[0] % div or shape[1] % div:
            raise ValueError(
                f"grid {shape} not divisible by 2^(levels-1) = {div}"
            )

    def _coeffs(self, sigma, batch: int):
        sig = np.asarray(sigma, dtype=float)
        if sig.ndim == 0:
            sig = np.full(batch, float(sig))
        return sig, precondition_coeffs(sig, self.config.sigma_data)

    def _assemble(self, x, coeffs, cond):
        xin = coeffs.c_in[:, None, None, None] * x
        if self.config.n_cond_channels:
            if cond is None:
                raise ValueError("conditional denoiser called without cond channels")
            if cond.shape[1] != self.config.n_cond_channels:
                raise ValueError(
                    f"expected {self.config.n_cond_channels} cond channels, "
                    f"got {cond.shape[1]}"
                )
            xin = np.concatenate([xin, cond], axis=1)
        return xin

    def forward_train(self, x, sigma, cond=None):
        """Forward pass keeping the cache needed for backward passes."""
        self.check_grid(x.shape[-2:])
        sig, coeffs = self._coeffs(sigma, x.shape[0])
        xin = self._assemble(x, coeffs, cond)
        f, net_cache = self.net.forward(xin, coeffs.c_noise)
        d = coeffs.c_skip[:, None, None, None] * x + coeffs.c_out[:, None, None, None] * f
        return d, (net_cache, coeffs, x)

    def backward_train(self, dd, cache, want_pgrads: bool = True):
        """Backprop dL/dD to dL/dx (and parameter grads when requested)."""
        net_cache, coeffs, x = cache
        df = coeffs.c_out[:, None, None, None] * dd
        dxin = self.net.backward(df, net_cache, want_pgrads)
        nc = self.config.n_channels
        dx = coeffs.c_in[:, None, None, None] * dxin[:, :nc]
        dx = dx + coeffs.c_skip[:, None, None, None] * dd
        return dx

    def __call__(self, x, sigma, cond=None):
        squeeze = x.ndim == 3
        xb = x[None] if squeeze else x
        cb = cond[None] if (cond is not None and cond.ndim == 3) else cond
        d, _ = self.forward_train(xb, sigma, cb)
        return d[0] if squeeze else d

    def vjp(self, x, sigma, v, cond=None):
        """J_D(x, sigma)^T v via one forward + one input-gradient backward."""
        squeeze = x.ndim == 3
        xb = x[None] if squeeze else x
        vb = v[None] if squeeze else v
        cb = cond[None] if (cond is not None and cond.ndim == 3) else cond
        _, cache = self.forward_train(xb, sigma, cb)
        dx = self.backward_train(vb, cache, want_pgrads=False)
        return dx[0] if squeeze else dx


def conditional_input(coarse_y: np.ndarray, static_forcing: np.ndarray,
                      pair: ResamplePair) -> np.ndarray:
    """Condition stack: bicubic-upsampled coarse channels + static forcing.

    coarse_y: (..., C, Hc, Wc); static_forcing: (H, W).  Returns
    (..., C+1, H, W); with the noisy state prepended by the denoiser this
    realizes the channel-concatenation conditioning.
    """
    if coarse_y.shape[-2:] != pair.coarse.shape:
        raise ValueError(
            f"coarse field {coarse_y.shape[-2:]} does not match pair.coarse "
            f"{pair.coarse.shape}"
        )
    if static_forcing.shape != pair.fine.shape:
        raise ValueError("static forcing must live on the fine grid")
    up = bicubic_upsample(coarse_y, pair)
    lead = up.shape[:-3] if up.ndim > 3 else ()
    forcing = np.broadcast_to(static_forcing, lead + (1,) + pair.fine.shape)
    return np.concatenate([up, forcing], axis=-3)


@dataclass(frozen=True)
class TrainConfig:
    n_steps: int = 2000
    batch_size: int = 4
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    log_every: int = 100


@dataclass
class TrainResult:
    loss_trace: np.ndarray
    n_steps: int


def train_denoiser(
    denoiser: ConvDenoiser,
    x0: np.ndarray,
    schedule: NoiseSchedule,
    config: TrainConfig,
    seed: int,
    cond: np.ndarray | None = None,
) -> TrainResult:
    """EDM training loop; bit-deterministic given (data, config, seed).

    x0: normalized (N, C, H, W) targets; cond: aligned (N, C_cond, H, W)
    conditioning stacks or None for the unconditional model.
    """
    n = x0.shape[0]
    if cond is not None and cond.shape[0] != n:
        raise ValueError("cond and x0 sample counts differ")
    denoiser.check_grid(x0.shape[-2:])
    order_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    noise_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    opt = AdamW(denoiser.net.parameters(), config.optimizer)
    trace = np.empty(config.n_steps)
    perm = order_rng.permutation(n)
    pos = 0
    for step in range(config.n_steps):
        if pos + config.batch_size > n:
            perm = order_rng.permutation(n)
            pos = 0
        idx = perm[pos : pos + config.batch_size]
        pos += config.batch_size
        x0b = x0[idx]
        condb = cond[idx] if cond is not None else None
        sigma = np.exp(noise_rng.normal(schedule.p_mean, schedule.p_std,
                                        size=config.batch_size))
        noise = noise_rng.standard_normal(x0b.shape)
        x_noisy = x0b + sigma[:, None, None, None] * noise
        d, cache = denoiser.forward_train(x_noisy, sigma, condb)
        lam = loss_weight(sigma, schedule.sigma_data)[:, None, None, None]
        diff = d - x0b
        loss = float(np.mean(lam * diff**2))
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite training loss at step {step}")
        dd = 2.0 * lam * diff / diff.size
        denoiser.backward_train(dd, cache)
        opt.step(lr_at(step, config.n_steps, config.optimizer))
        opt.zero_grad()
        trace[step] = loss
    return TrainResult(loss_trace=trace, n_steps=config.n_steps)

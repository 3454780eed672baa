"""Encoder-decoder convolutional backbones with explicit backward passes.

Two variants share the layer toolkit:

* :class:`DenoiserUNet` - residual blocks with a noise-level embedding
  pathway, average-pool downsampling and nearest-neighbor upsampling; the raw
  F_theta inside the EDM preconditioning wrapper.
* :class:`RegressorUNet` - the deterministic baseline: double 3x3 convs with
  group norm + ReLU, max-pool downsampling, bilinear upsampling, concat skips.
"""

from __future__ import annotations

import numpy as np

from .layers import (
    AvgPool2,
    BilinearUp2,
    Conv1x1,
    Conv3x3,
    GroupNorm,
    Linear,
    MaxPool2,
    Module,
    NearestUp2,
    relu,
    relu_backward,
    silu,
    silu_backward,
)


def _groups_for(channels: int, cap: int) -> int:
    g = min(cap, channels)
    while channels % g:
        g -= 1
    return g


class ResBlock(Module):
    """GN -> SiLU -> conv -> GN -> +emb shift -> SiLU -> conv(zero-init) -> +skip.

    The noise-embedding shift lands after the second normalization so it is
    not absorbed by the per-group mean subtraction.
    """

    def __init__(self, c_in: int, c_out: int, emb_dim: int, groups_cap: int,
                 rng: np.random.Generator):
        self.gn1 = GroupNorm(c_in, _groups_for(c_in, groups_cap))
        self.conv1 = Conv3x3(c_in, c_out, rng)
        self.emb_lin = Linear(emb_dim, c_out, rng)
        self.gn2 = GroupNorm(c_out, _groups_for(c_out, groups_cap))
        self.conv2 = Conv3x3(c_out, c_out, rng, zero_init=True)
        self.skip = Conv1x1(c_in, c_out, rng) if c_in != c_out else None

    def forward(self, x, emb):
        h, c1 = self.gn1.forward(x)
        h, c2 = silu(h)
        h, c3 = self.conv1.forward(h)
        h, c5 = self.gn2.forward(h)
        eb, c4 = self.emb_lin.forward(emb)
        h = h + eb[:, :, None, None]
        h, c6 = silu(h)
        h, c7 = self.conv2.forward(h)
        if self.skip is not None:
            sk, c8 = self.skip.forward(x)
        else:
            sk, c8 = x, None
        return h + sk, (c1, c2, c3, c4, c5, c6, c7, c8)

    def backward(self, dy, cache, want_pgrads: bool = True):
        c1, c2, c3, c4, c5, c6, c7, c8 = cache
        dsk = self.skip.backward(dy, c8, want_pgrads) if self.skip is not None else dy
        dh = self.conv2.backward(dy, c7, want_pgrads)
        dh = silu_backward(dh, c6)
        demb = self.emb_lin.backward(dh.sum(axis=(2, 3)), c4, want_pgrads)
        dh = self.gn2.backward(dh, c5, want_pgrads)
        dh = self.conv1.backward(dh, c3, want_pgrads)
        dh = silu_backward(dh, c2)
        dx = self.gn1.backward(dh, c1, want_pgrads)
        return dx + dsk, demb


class DenoiserUNet(Module):
    """Multi-level residual encoder-decoder with a noise embedding pathway."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        base_width: int = 16,
        channel_mults: tuple[int, ...] = (1, 2, 4),
        blocks_per_level: int = 2,
        emb_dim: int = 64,
        groups_cap: int = 8,
        n_fourier: int = 16,
        seed: int = 0,
    ):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD1F]))
        self.widths = [base_width * m for m in channel_mults]
        self.blocks_per_level = blocks_per_level
        self.freqs = np.exp(np.linspace(0.0, np.log(100.0), n_fourier))
        self.emb_lin1 = Linear(2 * n_fourier, emb_dim, rng)
        self.emb_lin2 = Linear(emb_dim, emb_dim, rng)
        self.conv_in = Conv3x3(c_in, self.widths[0], rng)
        self.down = AvgPool2()
        self.up = NearestUp2()
        self.enc_blocks = []
        prev = self.widths[0]
        for wl in self.widths:
            level = []
            for _ in range(blocks_per_level):
                level.append(ResBlock(prev, wl, emb_dim, groups_cap, rng))
                prev = wl
            self.enc_blocks.append(level)
        self.dec_blocks = []
        for li in range(len(self.widths) - 2, -1, -1):
            wl = self.widths[li]
            level = []
            ch = prev + wl  # upsampled + concat skip
            for _ in range(blocks_per_level):
                level.append(ResBlock(ch, wl, emb_dim, groups_cap, rng))
                ch = wl
            prev = wl
            self.dec_blocks.append(level)
        self.gn_out = GroupNorm(self.widths[0], _groups_for(self.widths[0], groups_cap))
        self.conv_out = Conv3x3(self.widths[0], c_out, rng, zero_init=True)

    # Module.parameters() walks lists of Modules, but not nested lists; keep
    # blocks as flat attributes for discovery.
    def parameters(self, prefix: str = ""):
        out = {}
        for name in ("emb_lin1", "emb_lin2", "conv_in", "gn_out", "conv_out"):
            out.update(getattr(self, name).parameters(prefix=f"{prefix}{name}."))
        for li, level in enumerate(self.enc_blocks):
            for bi, blk in enumerate(level):
                out.update(blk.parameters(prefix=f"{prefix}enc.{li}.{bi}."))
        for li, level in enumerate(self.dec_blocks):
            for bi, blk in enumerate(level):
                out.update(blk.parameters(prefix=f"{prefix}dec.{li}.{bi}."))
        return out

    def _embed(self, c_noise: np.ndarray):
        ang = c_noise[:, None] * self.freqs[None, :]
        ff = np.concatenate([np.cos(ang), np.sin(ang)], axis=1)
        h, c1 = self.emb_lin1.forward(ff)
        h, c2 = silu(h)
        h, c3 = self.emb_lin2.forward(h)
        emb, c4 = silu(h)
        return emb, (c1, c2, c3, c4)

    def _embed_backward(self, demb, cache, want_pgrads: bool = True):
        c1, c2, c3, c4 = cache
        dh = silu_backward(demb, c4)
        dh = self.emb_lin2.backward(dh, c3, want_pgrads)
        dh = silu_backward(dh, c2)
        self.emb_lin1.backward(dh, c1, want_pgrads)

    def forward(self, x, c_noise):
        """x: (B, C_in, H, W); c_noise: (B,).  H, W divisible by 2^(levels-1)."""
        emb, emb_cache = self._embed(np.asarray(c_noise, dtype=float))
        h, cin_cache = self.conv_in.forward(x)
        enc_caches, skips, down_caches = [], [], []
        n_levels = len(self.widths)
        for li, level in enumerate(self.enc_blocks):
            lvl_caches = []
            for blk in level:
                h, c = blk.forward(h, emb)
                lvl_caches.append(c)
            enc_caches.append(lvl_caches)
            if li < n_levels - 1:
                skips.append(h)
                h, dc = self.down.forward(h)
                down_caches.append(dc)
        dec_caches, up_caches, split_channels = [], [], []
        for di, level in enumerate(self.dec_blocks):
            h, uc = self.up.forward(h)
            up_caches.append(uc)
            skip = skips[len(skips) - 1 - di]
            split_channels.append(h.shape[1])
            h = np.concatenate([h, skip], axis=1)
            lvl_caches = []
            for blk in level:
                h, c = blk.forward(h, emb)
                lvl_caches.append(c)
            dec_caches.append(lvl_caches)
        h, gout_cache = self.gn_out.forward(h)
        h, sout_cache = silu(h)
        y, cout_cache = self.conv_out.forward(h)
        cache = (emb_cache, cin_cache, enc_caches, down_caches, up_caches,
                 dec_caches, split_channels, gout_cache, sout_cache, cout_cache)
        return y, cache

    def backward(self, dy, cache, want_pgrads: bool = True):
        (emb_cache, cin_cache, enc_caches, down_caches, up_caches, dec_caches,
         split_channels, gout_cache, sout_cache, cout_cache) = cache
        demb_total = None

        def add_emb(d):
            nonlocal demb_total
            demb_total = d if demb_total is None else demb_total + d

        dh = self.conv_out.backward(dy, cout_cache, want_pgrads)
        dh = silu_backward(dh, sout_cache)
        dh = self.gn_out.backward(dh, gout_cache, want_pgrads)
        dskips = []
        for di in range(len(self.dec_blocks) - 1, -1, -1):
            level, lvl_caches = self.dec_blocks[di], dec_caches[di]
            for bi in range(len(level) - 1, -1, -1):
                dh, de = level[bi].backward(dh, lvl_caches[bi], want_pgrads)
                add_emb(de)
            nc = split_channels[di]
            dskips.append((di, dh[:, nc:]))
            dh = self.up.backward(dh[:, :nc], up_caches[di], want_pgrads)
        dskip_by_level = {len(self.widths) - 2 - di: d for di, d in dskips}
        for li in range(len(self.enc_blocks) - 1, -1, -1):
            if li < len(self.widths) - 1:
                dh = self.down.backward(dh, down_caches[li], want_pgrads)
                dh = dh + dskip_by_level[li]
            for bi in range(len(self.enc_blocks[li]) - 1, -1, -1):
                dh, de = self.enc_blocks[li][bi].backward(
                    dh, enc_caches[li][bi], want_pgrads)
                add_emb(de)
        dx = self.conv_in.backward(dh, cin_cache, want_pgrads)
        self._embed_backward(demb_total, emb_cache, want_pgrads)
        return dx


class DoubleConv(Module):
    """[conv3x3 -> GN -> ReLU] x 2."""

    def __init__(self, c_in: int, c_out: int, groups_cap: int, rng):
        self.conv1 = Conv3x3(c_in, c_out, rng)
        self.gn1 = GroupNorm(c_out, _groups_for(c_out, groups_cap))
        self.conv2 = Conv3x3(c_out, c_out, rng)
        self.gn2 = GroupNorm(c_out, _groups_for(c_out, groups_cap))

    def forward(self, x):
        h, c1 = self.conv1.forward(x)
        h, c2 = self.gn1.forward(h)
        h, c3 = relu(h)
        h, c4 = self.conv2.forward(h)
        h, c5 = self.gn2.forward(h)
        y, c6 = relu(h)
        return y, (c1, c2, c3, c4, c5, c6)

    def backward(self, dy, cache, want_pgrads: bool = True):
        c1, c2, c3, c4, c5, c6 = cache
        dh = relu_backward(dy, c6)
        dh = self.gn2.backward(dh, c5, want_pgrads)
        dh = self.conv2.backward(dh, c4, want_pgrads)
        dh = relu_backward(dh, c3)
        dh = self.gn1.backward(dh, c2, want_pgrads)
        return self.conv1.backward(dh, c1, want_pgrads)


class RegressorUNet(Module):
    """Plain UNet: max-pool encoder, bilinear-upsampling decoder, concat skips."""

    def __init__(self, c_in: int, c_out: int, base_width: int = 16, depth: int = 3,
                 groups_cap: int = 8, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4E7]))
        self.widths = [base_width * 2**l for l in range(depth)]
        self.pool = MaxPool2()
        self.up = BilinearUp2()
        self.enc = []
        prev = c_in
        for wl in self.widths:
            self.enc.append(DoubleConv(prev, wl, groups_cap, rng))
            prev = wl
        self.dec = []
        for li in range(depth - 2, -1, -1):
            wl = self.widths[li]
            self.dec.append(DoubleConv(prev + wl, wl, groups_cap, rng))
            prev = wl
        self.conv_out = Conv1x1(self.widths[0], c_out, rng)

    def parameters(self, prefix: str = ""):
        out = {}
        for li, blk in enumerate(self.enc):
            out.update(blk.parameters(prefix=f"{prefix}enc.{li}."))
        for li, blk in enumerate(self.dec):
            out.update(blk.parameters(prefix=f"{prefix}dec.{li}."))
        out.update(self.conv_out.parameters(prefix=f"{prefix}conv_out."))
        return out

    def forward(self, x):
        skips, enc_caches, pool_caches = [], [], []
        h = x
        for li, blk in enumerate(self.enc):
            if li > 0:
                skips.append(h)
                h, pc = self.pool.forward(h)
                pool_caches.append(pc)
            h, c = blk.forward(h)
            enc_caches.append(c)
        dec_caches, up_caches, split_channels = [], [], []
        for di, blk in enumerate(self.dec):
            h, uc = self.up.forward(h)
            up_caches.append(uc)
            skip = skips[len(skips) - 1 - di]
            split_channels.append(h.shape[1])
            h = np.concatenate([h, skip], axis=1)
            h, c = blk.forward(h)
            dec_caches.append(c)
        y, cout_cache = self.conv_out.forward(h)
        return y, (enc_caches, pool_caches, up_caches, dec_caches,
                   split_channels, cout_cache)

    def backward(self, dy, cache, want_pgrads: bool = True):
        (enc_caches, pool_caches, up_caches, dec_caches, split_channels,
         cout_cache) = cache
        dh = self.conv_out.backward(dy, cout_cache, want_pgrads)
        dskips = []
        for di in range(len(self.dec) - 1, -1, -1):
            dh = self.dec[di].backward(dh, dec_caches[di], want_pgrads)
            nc = split_channels[di]
            dskips.append((di, dh[:, nc:]))
            dh = self.up.backward(dh[:, :nc], up_caches[di], want_pgrads)
        dskip_by_level = {len(self.enc) - 2 - di: d for di, d in dskips}
        for li in range(len(self.enc) - 1, -1, -1):
            dh = self.enc[li].backward(dh, enc_caches[li], want_pgrads)
            if li > 0:
                dh = self.pool.backward(dh, pool_caches[li - 1], want_pgrads)
                dh = dh + dskip_by_level[li - 1]
        return dh

"""Minimal numpy layers with explicit forward/backward passes.

Every layer exposes ``forward(x, ...) -> (y, cache)`` and
``backward(dy, cache, want_pgrads=True) -> dx``; parameter gradients accumulate
into the layer's :class:`Param` slots.  Convolutions use wrap padding in
longitude and edge padding in latitude (matching the bicubic resampler), so
conv networks are exactly equivariant to longitude rolls.
"""

from __future__ import annotations

import numpy as np

from .. import kernels


class Param:
    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value, dtype=float)
        self.grad = np.zeros_like(self.value)


class Module:
    """Base: children and params are discovered from instance attributes."""

    def parameters(self, prefix: str = "") -> dict[str, Param]:
        out: dict[str, Param] = {}
        for name, attr in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(attr, Param):
                out[key] = attr
            elif isinstance(attr, Module):
                out.update(attr.parameters(prefix=f"{key}."))
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        out.update(item.parameters(prefix=f"{key}.{i}."))
        return out

    def n_params(self) -> int:
        return sum(p.value.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad[...] = 0.0


def _he_std(fan_in: int) -> float:
    return float(np.sqrt(2.0 / fan_in))


class Conv3x3(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 zero_init: bool = False):
        self.c_in, self.c_out = c_in, c_out
        std = 0.0 if zero_init else _he_std(c_in * 9)
        self.w = Param(std * rng.standard_normal((c_out, c_in * 9)))
        self.b = Param(np.zeros(c_out))

    def forward(self, x):
        b, c, h, w = x.shape
        cols = kernels.im2col3(x)  # (C*9, B*H*W)
        y = self.w.value @ cols + self.b.value[:, None]
        y = y.reshape(self.c_out, b, h, w).transpose(1, 0, 2, 3)
        return y, (cols, x.shape)

    def backward(self, dy, cache, want_pgrads: bool = True):
        cols, xshape = cache
        b, c, h, w = xshape
        dyr = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(self.c_out, -1)
        if want_pgrads:
            self.w.grad += dyr @ cols.T
            self.b.grad += dyr.sum(axis=1)
        dcols = self.w.value.T @ dyr
        return kernels.col2im3(dcols, xshape)


class Conv1x1(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 zero_init: bool = False):
        self.c_in, self.c_out = c_in, c_out
        std = 0.0 if zero_init else _he_std(c_in)
        self.w = Param(std * rng.standard_normal((c_out, c_in)))
        self.b = Param(np.zeros(c_out))

    def forward(self, x):
        b, c, h, w = x.shape
        xr = np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, -1)
        y = self.w.value @ xr + self.b.value[:, None]
        return y.reshape(self.c_out, b, h, w).transpose(1, 0, 2, 3), (xr, x.shape)

    def backward(self, dy, cache, want_pgrads: bool = True):
        xr, xshape = cache
        b, c, h, w = xshape
        dyr = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(self.c_out, -1)
        if want_pgrads:
            self.w.grad += dyr @ xr.T
            self.b.grad += dyr.sum(axis=1)
        dx = self.w.value.T @ dyr
        return dx.reshape(c, b, h, w).transpose(1, 0, 2, 3)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 zero_init: bool = False):
        std = 0.0 if zero_init else _he_std(n_in)
        self.w = Param(std * rng.standard_normal((n_out, n_in)))
        self.b = Param(np.zeros(n_out))

    def forward(self, x):
        return x @ self.w.value.T + self.b.value, x

    def backward(self, dy, cache, want_pgrads: bool = True):
        x = cache
        if want_pgrads:
            self.w.grad += dy.T @ x
            self.b.grad += dy.sum(axis=0)
        return dy @ self.w.value


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int, eps: float = 1e-5):
        if channels % groups:
            raise ValueError(f"channels {channels} not divisible by groups {groups}")
        self.groups = groups
        self.eps = eps
        self.gamma = Param(np.ones(channels))
        self.beta = Param(np.zeros(channels))

    def forward(self, x):
        b, c, h, w = x.shape
        g = self.groups
        xg = x.reshape(b, g, -1)
        mu = xg.mean(axis=2, keepdims=True)
        var = xg.var(axis=2, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = ((xg - mu) * inv).reshape(b, c, h, w)
        y = self.gamma.value[:, None, None] * xhat + self.beta.value[:, None, None]
        return y, (xhat, inv, x.shape)

    def backward(self, dy, cache, want_pgrads: bool = True):
        xhat, inv, xshape = cache
        b, c, h, w = xshape
        g = self.groups
        if want_pgrads:
            self.gamma.grad += np.sum(dy * xhat, axis=(0, 2, 3))
            self.beta.grad += np.sum(dy, axis=(0, 2, 3))
        dxhat = (dy * self.gamma.value[:, None, None]).reshape(b, g, -1)
        xh = xhat.reshape(b, g, -1)
        m1 = dxhat.mean(axis=2, keepdims=True)
        m2 = (dxhat * xh).mean(axis=2, keepdims=True)
        dx = inv * (dxhat - m1 - xh * m2)
        return dx.reshape(b, c, h, w)


def silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, (x, s)


def silu_backward(dy, cache):
    x, s = cache
    return dy * s * (1.0 + x * (1.0 - s))


def relu(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


class AvgPool2(Module):
    def forward(self, x):
        b, c, h, w = x.shape
        y = x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
        return y, (h, w)

    def backward(self, dy, cache, want_pgrads: bool = True):
        h, w = cache
        return np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3) / 4.0


class MaxPool2(Module):
    def forward(self, x):
        b, c, h, w = x.shape
        xr = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        xr = np.ascontiguousarray(xr).reshape(b, c, h // 2, w // 2, 4)
        idx = np.argmax(xr, axis=-1)
        y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
        return y, (idx, (h, w))

    def backward(self, dy, cache, want_pgrads: bool = True):
        idx, (h, w) = cache
        b, c = dy.shape[:2]
        dz = np.zeros((b, c, h // 2, w // 2, 4))
        np.put_along_axis(dz, idx[..., None], dy[..., None], axis=-1)
        dz = dz.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return np.ascontiguousarray(dz).reshape(b, c, h, w)


class NearestUp2(Module):
    def forward(self, x):
        return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3), None

    def backward(self, dy, cache, want_pgrads: bool = True):
        b, c, h, w = dy.shape
        return dy.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def _bilinear_up2_matrix(n: int, periodic: bool) -> np.ndarray:
    """Half-pixel-aligned 2x bilinear upsampling as a dense (2n, n) matrix."""
    mat = np.zeros((2 * n, n))
    for i in range(n):
        lo = (i - 1) % n if periodic else max(i - 1, 0)
        hi = (i + 1) % n if periodic else min(i + 1, n - 1)
        mat[2 * i, i] += 0.75
        mat[2 * i, lo] += 0.25
        mat[2 * i + 1, i] += 0.75
        mat[2 * i + 1, hi] += 0.25
    return mat


class BilinearUp2(Module):
    """2x bilinear upsampling, periodic in lon and clamped in lat."""

    def __init__(self):
        self._cache_mats: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def _mats(self, h: int, w: int):
        key = (h, w)
        if key not in self._cache_mats:
            self._cache_mats[key] = (
                _bilinear_up2_matrix(h, periodic=False),
                _bilinear_up2_matrix(w, periodic=True),
            )
        return self._cache_mats[key]

    def forward(self, x):
        b, c, h, w = x.shape
        u_lat, u_lon = self._mats(h, w)
        y = np.matmul(np.matmul(u_lat, x), u_lon.T)
        return y, (h, w)

    def backward(self, dy, cache, want_pgrads: bool = True):
        h, w = cache
        u_lat, u_lon = self._mats(h, w)
        return np.matmul(np.matmul(u_lat.T, dy), u_lon)

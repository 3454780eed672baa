"""Hot numeric kernels: 3x3 conv patch extraction/scatter, separable 4-tap
stencil resampling, and weighted block-mean reduction.

Every kernel has a numba ``@njit`` implementation (``*_nb``) and a pure-numpy
one (``*_np``) selected by :mod:`diffsr.backend`.  Boundary convention for all
image-like operations: longitude (last axis) wraps periodically, latitude
(second-to-last axis) clamps to the edge row.
"""

from __future__ import annotations

import numpy as np

from .backend import NUMBA_ENABLED

if NUMBA_ENABLED:
    from numba import njit
else:  # pragma: no cover - exercised via DIFFSR_NUMBA=0 runs

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


# ---------------------------------------------------------------------------
# 3x3 patch extraction (im2col) and its transpose (col2im)
# ---------------------------------------------------------------------------


def _pad_wrap_edge(x: np.ndarray) -> np.ndarray:
    """Pad (B, C, H, W) by one cell: wrap in lon, clamp in lat."""
    x = np.pad(x, ((0, 0), (0, 0), (0, 0), (1, 1)), mode="wrap")
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (0, 0)), mode="edge")


def im2col3_np(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    padded = _pad_wrap_edge(x)
    taps = [padded[:, :, dy : dy + h, dx : dx + w] for dy in range(3) for dx in range(3)]
    cols = np.stack(taps, axis=2)  # (B, C, 9, H, W)
    return np.ascontiguousarray(cols.transpose(1, 2, 0, 3, 4)).reshape(c * 9, b * h * w)


@njit(cache=True)
def im2col3_nb(x):  # pragma: no cover - numerically identical to im2col3_np
    b, c, h, w = x.shape
    cols = np.empty((c * 9, b, h, w), dtype=x.dtype)
    for ci in range(c):
        for dy in range(3):
            for dx in range(3):
                k = ci * 9 + dy * 3 + dx
                for bi in range(b):
                    for i in range(h):
                        ii = i + dy - 1
                        if ii < 0:
                            ii = 0
                        elif ii >= h:
                            ii = h - 1
                        row_out = cols[k, bi, i]
                        row_in = x[bi, ci, ii]
                        if dx == 1:
                            row_out[:] = row_in
                        elif dx == 0:
                            row_out[0] = row_in[w - 1]
                            row_out[1:] = row_in[: w - 1]
                        else:
                            row_out[: w - 1] = row_in[1:]
                            row_out[w - 1] = row_in[0]
    return cols.reshape(c * 9, b * h * w)


def col2im3_np(cols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    b, c, h, w = shape
    taps = cols.reshape(c, 9, b, h, w).transpose(2, 0, 1, 3, 4)  # (B, C, 9, H, W)
    padded = np.zeros((b, c, h + 2, w + 2), dtype=cols.dtype)
    for dy in range(3):
        for dx in range(3):
            padded[:, :, dy : dy + h, dx : dx + w] += taps[:, :, dy * 3 + dx]
    # Fold periodic lon pads, then clamped lat pads (corners ride along).
    padded[:, :, :, w] += padded[:, :, :, 0]
    padded[:, :, :, 1] += padded[:, :, :, w + 1]
    padded[:, :, 1, :] += padded[:, :, 0, :]
    padded[:, :, h, :] += padded[:, :, h + 1, :]
    return padded[:, :, 1 : h + 1, 1 : w + 1].copy()


@njit(cache=True)
def col2im3_nb(cols, b, c, h, w):  # pragma: no cover
    cols4 = cols.reshape(c * 9, b, h, w)
    out = np.zeros((b, c, h, w), dtype=cols.dtype)
    for ci in range(c):
        for dy in range(3):
            for dx in range(3):
                k = ci * 9 + dy * 3 + dx
                for bi in range(b):
                    for i in range(h):
                        ii = i + dy - 1
                        if ii < 0:
                            ii = 0
                        elif ii >= h:
                            ii = h - 1
                        row_out = out[bi, ci, ii]
                        row_in = cols4[k, bi, i]
                        if dx == 1:
                            for j in range(w):
                                row_out[j] += row_in[j]
                        elif dx == 0:
                            row_out[w - 1] += row_in[0]
                            for j in range(1, w):
                                row_out[j - 1] += row_in[j]
                        else:
                            for j in range(w - 1):
                                row_out[j + 1] += row_in[j]
                            row_out[0] += row_in[w - 1]
    return out


def im2col3(x: np.ndarray) -> np.ndarray:
    """Extract 3x3 patches of (B, C, H, W) into a (C*9, B*H*W) matrix."""
    if NUMBA_ENABLED:
        return im2col3_nb(np.ascontiguousarray(x))
    return im2col3_np(x)


def col2im3(cols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    """Adjoint of :func:`im2col3`: scatter-add patches back to (B, C, H, W)."""
    if NUMBA_ENABLED:
        b, c, h, w = shape
        return col2im3_nb(np.ascontiguousarray(cols), b, c, h, w)
    return col2im3_np(cols, shape)


# ---------------------------------------------------------------------------
# Separable 4-tap stencil resampling (bicubic upsampling)
# ---------------------------------------------------------------------------


def stencil_matrix(idx: np.ndarray, weights: np.ndarray, n_src: int) -> np.ndarray:
    """Densify a (n_dst, taps) index/weight stencil into an (n_dst, n_src) matrix."""
    n_dst, taps = idx.shape
    mat = np.zeros((n_dst, n_src))
    for t in range(taps):
        np.add.at(mat, (np.arange(n_dst), idx[:, t]), weights[:, t])
    return mat


def apply_separable_np(field, idx_lat, w_lat, idx_lon, w_lon, n_lat_src, n_lon_src):
    g_lat = stencil_matrix(idx_lat, w_lat, n_lat_src)
    g_lon = stencil_matrix(idx_lon, w_lon, n_lon_src)
    lead = field.shape[:-2]
    f2 = field.reshape((-1,) + field.shape[-2:])
    out = np.matmul(np.matmul(g_lat, f2), g_lon.T)
    return out.reshape(lead + out.shape[-2:])


@njit(cache=True)
def _apply_separable_core(f2, idx_lat, w_lat, idx_lon, w_lon):  # pragma: no cover
    n, _, _ = f2.shape
    n_lat_dst, taps_lat = idx_lat.shape
    n_lon_dst, taps_lon = idx_lon.shape
    out = np.empty((n, n_lat_dst, n_lon_dst), dtype=f2.dtype)
    for m in range(n):
        for i in range(n_lat_dst):
            for j in range(n_lon_dst):
                acc = 0.0
                for a in range(taps_lat):
                    row = idx_lat[i, a]
                    wa = w_lat[i, a]
                    for b in range(taps_lon):
                        acc += wa * w_lon[j, b] * f2[m, row, idx_lon[j, b]]
                out[m, i, j] = acc
    return out


def apply_separable(field, idx_lat, w_lat, idx_lon, w_lon, n_lat_src, n_lon_src):
    """Apply a separable gather stencil over the trailing (lat, lon) axes."""
    if NUMBA_ENABLED:
        lead = field.shape[:-2]
        f2 = np.ascontiguousarray(field.reshape((-1,) + field.shape[-2:]))
        out = _apply_separable_core(f2, idx_lat, w_lat, idx_lon, w_lon)
        return out.reshape(lead + out.shape[-2:])
    return apply_separable_np(field, idx_lat, w_lat, idx_lon, w_lon, n_lat_src, n_lon_src)


# ---------------------------------------------------------------------------
# Weighted block-mean reduction (the coarsening measurement operator)
# ---------------------------------------------------------------------------


def block_mean_np(field: np.ndarray, factor: int, w_elem: np.ndarray) -> np.ndarray:
    h, w = field.shape[-2:]
    hc, wc = h // factor, w // factor
    lead = field.shape[:-2]
    r = field.reshape(lead + (hc, factor, wc, factor))
    return np.einsum("...hawb,ha->...hw", r, w_elem)


@njit(cache=True)
def _block_mean_core(f2, factor, w_elem):  # pragma: no cover
    n, h, w = f2.shape
    hc, wc = h // factor, w // factor
    out = np.zeros((n, hc, wc), dtype=f2.dtype)
    for m in range(n):
        for i in range(hc):
            for a in range(factor):
                wa = w_elem[i, a]
                row = i * factor + a
                for j in range(wc):
                    acc = 0.0
                    for b in range(factor):
                        acc += f2[m, row, j * factor + b]
                    out[m, i, j] += wa * acc
    return out


def block_mean(field: np.ndarray, factor: int, w_elem: np.ndarray) -> np.ndarray:
    """Weighted block mean over trailing (lat, lon); w_elem is (H/f, f) with
    rows summing to 1/f so each f x f block averages to one coarse cell."""
    if NUMBA_ENABLED:
        lead = field.shape[:-2]
        f2 = np.ascontiguousarray(field.reshape((-1,) + field.shape[-2:]))
        out = _block_mean_core(f2, factor, w_elem)
        return out.reshape(lead + out.shape[-2:])
    return block_mean_np(field, factor, w_elem)


def block_spread(coarse: np.ndarray, factor: int, w_elem: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`block_mean` (same weights, scatter instead of gather)."""
    lead = coarse.shape[:-2]
    hc, wc = coarse.shape[-2:]
    out = coarse[..., :, None, :, None] * w_elem[:, :, None, None]
    out = np.broadcast_to(out, lead + (hc, factor, wc, factor))
    return np.ascontiguousarray(out).reshape(lead + (hc * factor, wc * factor))

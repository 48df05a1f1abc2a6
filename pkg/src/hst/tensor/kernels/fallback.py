"""Pure-numpy implementations of the spatial hot kernels.

Convolutions accumulate one kernel offset at a time: for a KHxKW kernel
that is KH*KW strided slices contracted with BLAS, which avoids the
im2col buffer while staying vectorized. Bilinear resizing uses the
half-pixel (align_corners=False) convention with clamped borders.
"""

from __future__ import annotations

import numpy as np


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    b, c, h, ww = x.shape
    f, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (ww + 2 * padding - kw) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((b, f, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            window = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            out += np.einsum("bchw,fc->bfhw", window, w[:, :, i, j], optimize=True)
    return out


def conv2d_grad_input(
    g: np.ndarray, w: np.ndarray, stride: int, padding: int, in_h: int, in_w: int
) -> np.ndarray:
    b = g.shape[0]
    f, c, kh, kw = w.shape
    oh, ow = g.shape[2], g.shape[3]
    gx = np.zeros((b, c, in_h + 2 * padding, in_w + 2 * padding), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += np.einsum(
                "bfhw,fc->bchw", g, w[:, :, i, j], optimize=True
            )
    if padding:
        gx = gx[:, :, padding : padding + in_h, padding : padding + in_w]
    return np.ascontiguousarray(gx)


def conv2d_grad_weight(
    g: np.ndarray, x: np.ndarray, kh: int, kw: int, stride: int, padding: int
) -> np.ndarray:
    f = g.shape[1]
    c = x.shape[1]
    oh, ow = g.shape[2], g.shape[3]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    gw = np.zeros((f, c, kh, kw), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            window = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            gw[:, :, i, j] = np.einsum("bfhw,bchw->fc", g, window, optimize=True)
    return gw


def _sample_grid(out_size: int, in_size: int, dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel source coordinates, clamped to the input range."""
    src = (np.arange(out_size, dtype=dtype) + dtype(0.5)) * dtype(in_size / out_size) - dtype(0.5)
    src = np.clip(src, 0, in_size - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = (src - lo).astype(dtype)
    return lo, hi, frac


def bilinear_forward(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    _, _, h, w = x.shape
    dtype = x.dtype.type
    r0, r1, rf = _sample_grid(out_h, h, dtype)
    c0, c1, cf = _sample_grid(out_w, w, dtype)
    rf = rf[:, None]
    cf = cf[None, :]
    top = x[:, :, r0[:, None], c0[None, :]] * (1 - cf) + x[:, :, r0[:, None], c1[None, :]] * cf
    bot = x[:, :, r1[:, None], c0[None, :]] * (1 - cf) + x[:, :, r1[:, None], c1[None, :]] * cf
    return np.ascontiguousarray(top * (1 - rf) + bot * rf)


def bilinear_grad_input(g: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    b, c, oh, ow = g.shape
    dtype = g.dtype.type
    r0, r1, rf = _sample_grid(oh, in_h, dtype)
    c0, c1, cf = _sample_grid(ow, in_w, dtype)
    gx = np.zeros((b, c, in_h, in_w), dtype=g.dtype)
    rf = rf[:, None]
    cf = cf[None, :]
    # np.add.at scatters duplicates deterministically (sequential order).
    np.add.at(gx, (slice(None), slice(None), r0[:, None], c0[None, :]), g * (1 - rf) * (1 - cf))
    np.add.at(gx, (slice(None), slice(None), r0[:, None], c1[None, :]), g * (1 - rf) * cf)
    np.add.at(gx, (slice(None), slice(None), r1[:, None], c0[None, :]), g * rf * (1 - cf))
    np.add.at(gx, (slice(None), slice(None), r1[:, None], c1[None, :]), g * rf * cf)
    return gx

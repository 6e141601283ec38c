"""NHWC convolution and pooling primitives on raw numpy arrays.

Convolution is cross-correlation (no kernel flip). "same" padding uses
total = max(0, (ceil(in/stride)-1)*stride + k - in), split floor-left /
ceil-right, so outputs are bit-reproducible.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def pad_amounts(in_size: int, k: int, stride: int, padding: str) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    total = max(0, (math.ceil(in_size / stride) - 1) * stride + k - in_size)
    return total // 2, total - total // 2


def out_size(in_size: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return math.ceil(in_size / stride)
    return (in_size - k) // stride + 1


def _pad_hw(x: np.ndarray, kh: int, kw: int, strides, padding: str, value: float):
    sh, sw = strides
    pt, pb = pad_amounts(x.shape[1], kh, sh, padding)
    pl, pr = pad_amounts(x.shape[2], kw, sw, padding)
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=value)
    return x, (pt, pl)


def conv2d(x: np.ndarray, w: np.ndarray, strides, padding: str) -> np.ndarray:
    """x: (n,h,w,cin), w: (kh,kw,cin,cout) -> (n,oh,ow,cout)."""
    kh, kw, cin, _ = w.shape
    sh, sw = strides
    oh = out_size(x.shape[1], kh, sh, padding)
    ow = out_size(x.shape[2], kw, sw, padding)
    xp, _ = _pad_hw(x, kh, kw, strides, padding, 0.0)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    win = win[:, :oh, :ow]
    return np.einsum("nhwcij,ijco->nhwo", win, w.astype(x.dtype), optimize=True)


def conv2d_input_grad(
    dy: np.ndarray, w: np.ndarray, x_shape, strides, padding: str
) -> np.ndarray:
    """Transposed correlation: scatter dy back through the kernel taps."""
    n, h, wid, cin = x_shape
    kh, kw, _, _ = w.shape
    sh, sw = strides
    pt, pb = pad_amounts(h, kh, sh, padding)
    pl, pr = pad_amounts(wid, kw, sw, padding)
    oh, ow = dy.shape[1], dy.shape[2]
    w = w.astype(dy.dtype)
    dxp = np.zeros((n, h + pt + pb, wid + pl + pr, cin), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            tap = np.einsum("nhwo,co->nhwc", dy, w[i, j], optimize=True)
            dxp[:, i : i + oh * sh : sh, j : j + ow * sw : sw, :] += tap
    return dxp[:, pt : pt + h, pl : pl + wid, :]


def im2col(x: np.ndarray, kernel_hw, strides, padding: str) -> np.ndarray:
    """Patches as rows: (n, oh, ow, kh*kw*cin), tap-major then channel."""
    kh, kw = kernel_hw
    sh, sw = strides
    oh = out_size(x.shape[1], kh, sh, padding)
    ow = out_size(x.shape[2], kw, sw, padding)
    xp, _ = _pad_hw(x, kh, kw, strides, padding, 0.0)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    win = win[:, :oh, :ow]  # (n, oh, ow, c, kh, kw)
    win = np.moveaxis(win, 3, 5)  # (n, oh, ow, kh, kw, c)
    return win.reshape(win.shape[0], oh, ow, -1)


def col2im(cols: np.ndarray, x_shape, kernel_hw, strides, padding: str) -> np.ndarray:
    """Adjoint of im2col: add each patch row back into its source window."""
    n, h, wid, cin = x_shape
    kh, kw = kernel_hw
    sh, sw = strides
    pt, pb = pad_amounts(h, kh, sh, padding)
    pl, pr = pad_amounts(wid, kw, sw, padding)
    oh, ow = cols.shape[1], cols.shape[2]
    dxp = np.zeros((n, h + pt + pb, wid + pl + pr, cin), dtype=cols.dtype)
    cols = cols.reshape(n, oh, ow, kh, kw, cin)
    ni, oi, oj = np.indices((n, oh, ow), sparse=True)
    for i in range(kh):
        for j in range(kw):
            np.add.at(dxp, (ni, oi * sh + i, oj * sw + j), cols[:, :, :, i, j, :])
    return dxp[:, pt : pt + h, pl : pl + wid, :]


def maxpool(x: np.ndarray, pool, strides, padding: str) -> np.ndarray:
    y, _ = maxpool_argmax(x, pool, strides, padding)
    return y


def maxpool_argmax(x: np.ndarray, pool, strides, padding: str):
    """Windowed max plus the flat in-window argmax (first max, row-major)."""
    ph, pw = pool
    sh, sw = strides
    oh = out_size(x.shape[1], ph, sh, padding)
    ow = out_size(x.shape[2], pw, sw, padding)
    xp, _ = _pad_hw(x, ph, pw, strides, padding, -np.inf)
    win = sliding_window_view(xp, (ph, pw), axis=(1, 2))[:, ::sh, ::sw]
    win = win[:, :oh, :ow]  # (n, oh, ow, c, ph, pw)
    flat = win.reshape(*win.shape[:4], ph * pw)
    idx = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool_input_grad(dy: np.ndarray, x: np.ndarray, pool, strides, padding: str):
    """Route dy to each window's first maximal element."""
    ph, pw = pool
    sh, sw = strides
    _, idx = maxpool_argmax(x, pool, strides, padding)
    pt, _ = pad_amounts(x.shape[1], ph, sh, padding)
    pl, _ = pad_amounts(x.shape[2], pw, sw, padding)
    n, oh, ow, c = dy.shape
    ni, oi, oj, ci = np.indices((n, oh, ow, c), sparse=False)
    hi = oi * sh + idx // pw - pt
    wj = oj * sw + idx % pw - pl
    dx = np.zeros_like(x, dtype=dy.dtype)
    np.add.at(dx, (ni, hi, wj, ci), dy)
    return dx

"""Pure-numpy convolution kernels (im2col + BLAS).

Fallback implementation behind `bevworld.kernels`; the compiled extension in
`_core.pyx` exposes the same three functions.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # (C, H', W', kh, kw) -> (C*kh*kw, H'*W')
    oh, ow = win.shape[1], win.shape[2]
    col = win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, oh * ow)
    return np.ascontiguousarray(col)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int, pad: int) -> np.ndarray:
    f, c, kh, kw = w.shape
    oh = (x.shape[1] + 2 * pad - kh) // stride + 1
    ow = (x.shape[2] + 2 * pad - kw) // stride + 1
    col = _im2col(x, kh, kw, stride, pad)
    out = (w.reshape(f, -1) @ col).reshape(f, oh, ow)
    if b is not None:
        out += b[:, None, None]
    return out


def conv2d_grad_weights(gout: np.ndarray, x: np.ndarray, stride: int, pad: int, kh: int, kw: int) -> np.ndarray:
    f = gout.shape[0]
    col = _im2col(x, kh, kw, stride, pad)
    gw = gout.reshape(f, -1) @ col.T
    return gw.reshape(f, x.shape[0], kh, kw)


def conv2d_grad_input(gout: np.ndarray, w: np.ndarray, stride: int, pad: int, in_h: int, in_w: int) -> np.ndarray:
    f, c, kh, kw = w.shape
    oh, ow = gout.shape[1], gout.shape[2]
    cols = w.reshape(f, -1).T @ gout.reshape(f, -1)  # (C*kh*kw, oh*ow)
    cols = cols.reshape(c, kh, kw, oh, ow)
    gx = np.zeros((c, in_h + 2 * pad, in_w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            gx[:, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, i, j]
    if pad:
        gx = gx[:, pad : pad + in_h, pad : pad + in_w]
    return np.ascontiguousarray(gx)

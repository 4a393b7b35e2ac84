"""Vectorized numpy implementations of the hot kernels.

This is the fallback backend used when the compiled extension is not
available (and the reference its outputs are compared against). All
functions operate on planar (channels, height, width) float arrays and
preserve the input dtype (float32 or float64).

Conventions, shared bit-for-bit with the compiled backend:
  - 3x3 convolution, stride 1, one pixel of edge-replication padding,
    kernel layout (out_ch, in_ch, 3, 3).
  - 3x3 transposed convolution, stride 2, padding 1, output padding 1,
    so spatial dims exactly double; same kernel layout.
  - 2x2 pooling with stride 2; max pooling routes the gradient to the
    first maximum in row-major window order.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "numpy"


def _edge_pad(x):
    return np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")


def _fold_edge_pad(gpad):
    """Adjoint of 1-pixel edge padding: border gradients fold onto edges."""
    g = gpad[:, 1:-1, 1:-1].copy()
    g[:, 0, :] += gpad[:, 0, 1:-1]
    g[:, -1, :] += gpad[:, -1, 1:-1]
    g[:, :, 0] += gpad[:, 1:-1, 0]
    g[:, :, -1] += gpad[:, 1:-1, -1]
    g[:, 0, 0] += gpad[:, 0, 0]
    g[:, 0, -1] += gpad[:, 0, -1]
    g[:, -1, 0] += gpad[:, -1, 0]
    g[:, -1, -1] += gpad[:, -1, -1]
    return g


def conv2d_fwd(x, k, b):
    """3x3 replicate-padded convolution: (C,H,W) -> (O,H,W)."""
    win = sliding_window_view(_edge_pad(x), (3, 3), axis=(1, 2))
    y = np.tensordot(k, win, axes=([1, 2, 3], [0, 3, 4]))
    y += b[:, None, None]
    return np.ascontiguousarray(y)


def conv2d_bwd(x, k, gy):
    """Gradients of conv2d_fwd w.r.t. input, kernel and bias."""
    win = sliding_window_view(_edge_pad(x), (3, 3), axis=(1, 2))
    gk = np.tensordot(gy, win, axes=([1, 2], [1, 2]))
    gb = gy.sum(axis=(1, 2))
    # gradient w.r.t. the padded input is a full correlation with the
    # spatially flipped kernel; edge folding accounts for replication
    gyz = np.pad(gy, ((0, 0), (2, 2), (2, 2)))
    gwin = sliding_window_view(gyz, (3, 3), axis=(1, 2))
    kf = np.ascontiguousarray(k[:, :, ::-1, ::-1])
    gpad = np.tensordot(kf, gwin, axes=([0, 2, 3], [0, 3, 4]))
    return _fold_edge_pad(gpad), np.ascontiguousarray(gk), gb


def conv2d_transpose_fwd(x, k, b):
    """Stride-2 3x3 transposed convolution: (C,H,W) -> (O,2H,2W)."""
    ci, h, w = x.shape
    o = k.shape[0]
    big = np.zeros((o, 2 * h + 2, 2 * w + 2), dtype=x.dtype)
    for u in range(3):
        for v in range(3):
            big[:, u : u + 2 * h : 2, v : v + 2 * w : 2] += np.einsum(
                "oi,ihw->ohw", k[:, :, u, v], x
            )
    y = big[:, 1 : 1 + 2 * h, 1 : 1 + 2 * w] + b[:, None, None]
    return np.ascontiguousarray(y)


def conv2d_transpose_bwd(x, k, gy):
    """Gradients of conv2d_transpose_fwd w.r.t. input, kernel and bias."""
    ci, h, w = x.shape
    gyb = np.pad(gy, ((0, 0), (1, 1), (1, 1)))
    gx = np.zeros_like(x)
    gk = np.zeros_like(k)
    for u in range(3):
        for v in range(3):
            sl = gyb[:, u : u + 2 * h : 2, v : v + 2 * w : 2]
            gx += np.einsum("oi,ohw->ihw", k[:, :, u, v], sl)
            gk[:, :, u, v] = np.einsum("ohw,ihw->oi", sl, x)
    gb = gy.sum(axis=(1, 2))
    return gx, gk, gb


def _windows2(x):
    c, h, w = x.shape
    return np.ascontiguousarray(
        x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4)
    ).reshape(c, h // 2, w // 2, 4)


def max_pool2_fwd(x):
    return np.ascontiguousarray(_windows2(x).max(axis=-1))


def max_pool2_bwd(x, gy):
    win = _windows2(x)
    idx = win.argmax(axis=-1)  # first max in row-major window scan
    g = np.zeros_like(win)
    np.put_along_axis(g, idx[..., None], gy[..., None], axis=-1)
    c, h2, w2, _ = g.shape
    return np.ascontiguousarray(
        g.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4)
    ).reshape(c, 2 * h2, 2 * w2)


def avg_pool2_fwd(x):
    return np.ascontiguousarray(_windows2(x).mean(axis=-1))


def avg_pool2_bwd(gy):
    c, h2, w2 = gy.shape
    g = np.broadcast_to(gy[..., None] * gy.dtype.type(0.25), (c, h2, w2, 4))
    return np.ascontiguousarray(
        g.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4)
    ).reshape(c, 2 * h2, 2 * w2)

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twin of numpy_backend: direct-loop conv and pooling kernels.

Semantics match numpy_backend exactly (same padding, same kernel layout,
same first-max tie-break); only the accumulation strategy differs.
"""

import numpy as np

NAME = "compiled"

ctypedef fused real:
    float
    double


cdef void _pad_edge(real[:, :, ::1] x, real[:, :, ::1] xp) noexcept nogil:
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t c, i, j
    for c in range(C):
        for i in range(H):
            for j in range(W):
                xp[c, i + 1, j + 1] = x[c, i, j]
        for j in range(W):
            xp[c, 0, j + 1] = x[c, 0, j]
            xp[c, H + 1, j + 1] = x[c, H - 1, j]
        for i in range(H + 2):
            xp[c, i, 0] = xp[c, i, 1]
            xp[c, i, W + 1] = xp[c, i, W]


def conv2d_fwd(real[:, :, ::1] x, real[:, :, :, ::1] k, real[::1] b):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t O = k.shape[0]
    dt = np.float32 if real is float else np.float64
    xp_np = np.empty((C, H + 2, W + 2), dtype=dt)
    y_np = np.empty((O, H, W), dtype=dt)
    cdef real[:, :, ::1] xp = xp_np
    cdef real[:, :, ::1] y = y_np
    cdef Py_ssize_t o, c, i, j
    cdef real bo
    cdef real k00, k01, k02, k10, k11, k12, k20, k21, k22
    with nogil:
        _pad_edge(x, xp)
        for o in range(O):
            bo = b[o]
            for i in range(H):
                for j in range(W):
                    y[o, i, j] = bo
            for c in range(C):
                k00 = k[o, c, 0, 0]; k01 = k[o, c, 0, 1]; k02 = k[o, c, 0, 2]
                k10 = k[o, c, 1, 0]; k11 = k[o, c, 1, 1]; k12 = k[o, c, 1, 2]
                k20 = k[o, c, 2, 0]; k21 = k[o, c, 2, 1]; k22 = k[o, c, 2, 2]
                for i in range(H):
                    for j in range(W):
                        y[o, i, j] += (
                            k00 * xp[c, i, j] + k01 * xp[c, i, j + 1] + k02 * xp[c, i, j + 2]
                            + k10 * xp[c, i + 1, j] + k11 * xp[c, i + 1, j + 1] + k12 * xp[c, i + 1, j + 2]
                            + k20 * xp[c, i + 2, j] + k21 * xp[c, i + 2, j + 1] + k22 * xp[c, i + 2, j + 2]
                        )
    return y_np


def conv2d_bwd(real[:, :, ::1] x, real[:, :, :, ::1] k, real[:, :, ::1] gy):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t O = k.shape[0]
    dt = np.float32 if real is float else np.float64
    xp_np = np.empty((C, H + 2, W + 2), dtype=dt)
    gyz_np = np.zeros((O, H + 4, W + 4), dtype=dt)
    gpad_np = np.empty((C, H + 2, W + 2), dtype=dt)
    gx_np = np.empty((C, H, W), dtype=dt)
    gk_np = np.zeros((O, C, 3, 3), dtype=dt)
    gb_np = np.zeros(O, dtype=dt)
    cdef real[:, :, ::1] xp = xp_np
    cdef real[:, :, ::1] gyz = gyz_np
    cdef real[:, :, ::1] gpad = gpad_np
    cdef real[:, :, ::1] gx = gx_np
    cdef real[:, :, :, ::1] gk = gk_np
    cdef real[::1] gb = gb_np
    cdef Py_ssize_t o, c, i, j
    cdef real g, t, acc
    cdef real s00, s01, s02, s10, s11, s12, s20, s21, s22
    cdef real f00, f01, f02, f10, f11, f12, f20, f21, f22
    with nogil:
        _pad_edge(x, xp)
        for o in range(O):
            t = 0
            for i in range(H):
                for j in range(W):
                    g = gy[o, i, j]
                    gyz[o, i + 2, j + 2] = g
                    t += g
            gb[o] = t
            # kernel gradient: nine shifted dot products in one sweep
            for c in range(C):
                s00 = s01 = s02 = s10 = s11 = s12 = s20 = s21 = s22 = 0
                for i in range(H):
                    for j in range(W):
                        g = gy[o, i, j]
                        s00 += g * xp[c, i, j]
                        s01 += g * xp[c, i, j + 1]
                        s02 += g * xp[c, i, j + 2]
                        s10 += g * xp[c, i + 1, j]
                        s11 += g * xp[c, i + 1, j + 1]
                        s12 += g * xp[c, i + 1, j + 2]
                        s20 += g * xp[c, i + 2, j]
                        s21 += g * xp[c, i + 2, j + 1]
                        s22 += g * xp[c, i + 2, j + 2]
                gk[o, c, 0, 0] = s00; gk[o, c, 0, 1] = s01; gk[o, c, 0, 2] = s02
                gk[o, c, 1, 0] = s10; gk[o, c, 1, 1] = s11; gk[o, c, 1, 2] = s12
                gk[o, c, 2, 0] = s20; gk[o, c, 2, 1] = s21; gk[o, c, 2, 2] = s22
        # input gradient on the padded canvas: full correlation of the
        # zero-padded output gradient with the spatially flipped kernel
        for c in range(C):
            for i in range(H + 2):
                for j in range(W + 2):
                    gpad[c, i, j] = 0
            for o in range(O):
                f00 = k[o, c, 2, 2]; f01 = k[o, c, 2, 1]; f02 = k[o, c, 2, 0]
                f10 = k[o, c, 1, 2]; f11 = k[o, c, 1, 1]; f12 = k[o, c, 1, 0]
                f20 = k[o, c, 0, 2]; f21 = k[o, c, 0, 1]; f22 = k[o, c, 0, 0]
                for i in range(H + 2):
                    for j in range(W + 2):
                        gpad[c, i, j] += (
                            f00 * gyz[o, i, j] + f01 * gyz[o, i, j + 1] + f02 * gyz[o, i, j + 2]
                            + f10 * gyz[o, i + 1, j] + f11 * gyz[o, i + 1, j + 1] + f12 * gyz[o, i + 1, j + 2]
                            + f20 * gyz[o, i + 2, j] + f21 * gyz[o, i + 2, j + 1] + f22 * gyz[o, i + 2, j + 2]
                        )
        # fold the padded-border gradient onto the replicated edge cells
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    gx[c, i, j] = gpad[c, i + 1, j + 1]
            for j in range(W):
                gx[c, 0, j] += gpad[c, 0, j + 1]
                gx[c, H - 1, j] += gpad[c, H + 1, j + 1]
            for i in range(H):
                gx[c, i, 0] += gpad[c, i + 1, 0]
                gx[c, i, W - 1] += gpad[c, i + 1, W + 1]
            gx[c, 0, 0] += gpad[c, 0, 0]
            gx[c, 0, W - 1] += gpad[c, 0, W + 1]
            gx[c, H - 1, 0] += gpad[c, H + 1, 0]
            gx[c, H - 1, W - 1] += gpad[c, H + 1, W + 1]
    return gx_np, gk_np, gb_np


def conv2d_transpose_fwd(real[:, :, ::1] x, real[:, :, :, ::1] k, real[::1] b):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t O = k.shape[0]
    dt = np.float32 if real is float else np.float64
    big_np = np.zeros((O, 2 * H + 2, 2 * W + 2), dtype=dt)
    cdef real[:, :, ::1] big = big_np
    cdef Py_ssize_t o, c, u, v, i, j
    cdef real kv
    with nogil:
        for o in range(O):
            for c in range(C):
                for u in range(3):
                    for v in range(3):
                        kv = k[o, c, u, v]
                        for i in range(H):
                            for j in range(W):
                                big[o, 2 * i + u, 2 * j + v] += kv * x[c, i, j]
    y = np.ascontiguousarray(big_np[:, 1 : 2 * H + 1, 1 : 2 * W + 1])
    y += np.asarray(b)[:, None, None]
    return y


def conv2d_transpose_bwd(real[:, :, ::1] x, real[:, :, :, ::1] k, real[:, :, ::1] gy):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t O = k.shape[0]
    dt = np.float32 if real is float else np.float64
    gyb_np = np.zeros((O, 2 * H + 2, 2 * W + 2), dtype=dt)
    gyb_np[:, 1 : 2 * H + 1, 1 : 2 * W + 1] = gy
    gx_np = np.zeros((C, H, W), dtype=dt)
    gk_np = np.zeros((O, C, 3, 3), dtype=dt)
    gb_np = np.asarray(gy).sum(axis=(1, 2))
    cdef real[:, :, ::1] gyb = gyb_np
    cdef real[:, :, ::1] gx = gx_np
    cdef real[:, :, :, ::1] gk = gk_np
    cdef Py_ssize_t o, c, u, v, i, j
    cdef real kv, s, g
    with nogil:
        for o in range(O):
            for c in range(C):
                for u in range(3):
                    for v in range(3):
                        kv = k[o, c, u, v]
                        s = 0
                        for i in range(H):
                            for j in range(W):
                                g = gyb[o, 2 * i + u, 2 * j + v]
                                gx[c, i, j] += kv * g
                                s += x[c, i, j] * g
                        gk[o, c, u, v] = s
    return gx_np, gk_np, gb_np


def max_pool2_fwd(real[:, :, ::1] x):
    cdef Py_ssize_t C = x.shape[0], H2 = x.shape[1] // 2, W2 = x.shape[2] // 2
    dt = np.float32 if real is float else np.float64
    y_np = np.empty((C, H2, W2), dtype=dt)
    cdef real[:, :, ::1] y = y_np
    cdef Py_ssize_t c, i, j
    cdef real m, v
    with nogil:
        for c in range(C):
            for i in range(H2):
                for j in range(W2):
                    m = x[c, 2 * i, 2 * j]
                    v = x[c, 2 * i, 2 * j + 1]
                    if v > m:
                        m = v
                    v = x[c, 2 * i + 1, 2 * j]
                    if v > m:
                        m = v
                    v = x[c, 2 * i + 1, 2 * j + 1]
                    if v > m:
                        m = v
                    y[c, i, j] = m
    return y_np


def max_pool2_bwd(real[:, :, ::1] x, real[:, :, ::1] gy):
    cdef Py_ssize_t C = x.shape[0], H2 = x.shape[1] // 2, W2 = x.shape[2] // 2
    dt = np.float32 if real is float else np.float64
    gx_np = np.zeros((C, 2 * H2, 2 * W2), dtype=dt)
    cdef real[:, :, ::1] gx = gx_np
    cdef Py_ssize_t c, i, j, bi, bj, di, dj
    cdef real m, v
    with nogil:
        for c in range(C):
            for i in range(H2):
                for j in range(W2):
                    # first max in row-major window order
                    m = x[c, 2 * i, 2 * j]
                    bi = 0
                    bj = 0
                    for di in range(2):
                        for dj in range(2):
                            v = x[c, 2 * i + di, 2 * j + dj]
                            if v > m:
                                m = v
                                bi = di
                                bj = dj
                    gx[c, 2 * i + bi, 2 * j + bj] = gy[c, i, j]
    return gx_np


def avg_pool2_fwd(real[:, :, ::1] x):
    cdef Py_ssize_t C = x.shape[0], H2 = x.shape[1] // 2, W2 = x.shape[2] // 2
    dt = np.float32 if real is float else np.float64
    y_np = np.empty((C, H2, W2), dtype=dt)
    cdef real[:, :, ::1] y = y_np
    cdef Py_ssize_t c, i, j
    with nogil:
        for c in range(C):
            for i in range(H2):
                for j in range(W2):
                    y[c, i, j] = (
                        x[c, 2 * i, 2 * j]
                        + x[c, 2 * i, 2 * j + 1]
                        + x[c, 2 * i + 1, 2 * j]
                        + x[c, 2 * i + 1, 2 * j + 1]
                    ) / 4
    return y_np


def avg_pool2_bwd(real[:, :, ::1] gy):
    cdef Py_ssize_t C = gy.shape[0], H2 = gy.shape[1], W2 = gy.shape[2]
    dt = np.float32 if real is float else np.float64
    gx_np = np.empty((C, 2 * H2, 2 * W2), dtype=dt)
    cdef real[:, :, ::1] gx = gx_np
    cdef Py_ssize_t c, i, j
    cdef real q
    with nogil:
        for c in range(C):
            for i in range(H2):
                for j in range(W2):
                    q = gy[c, i, j] / 4
                    gx[c, 2 * i, 2 * j] = q
                    gx[c, 2 * i, 2 * j + 1] = q
                    gx[c, 2 * i + 1, 2 * j] = q
                    gx[c, 2 * i + 1, 2 * j + 1] = q
    return gx_np

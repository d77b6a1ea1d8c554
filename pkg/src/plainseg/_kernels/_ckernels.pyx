# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: im2col/col2im and multi-scale deformable sampling.

Loops run in a fixed order, so results are deterministic run to run.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

ctypedef fused floating:
    float
    double


def im2col(floating[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((B, C * kh * kw, Ho * Wo), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, oy, ox, iy, ix, row
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for oy in range(Ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= H:
                                continue
                            for ox in range(Wo):
                                ix = ox * stride + j - pad
                                if ix < 0 or ix >= W:
                                    continue
                                out[b, row, oy * Wo + ox] = x[b, c, iy, ix]
    return out_arr


def col2im(floating[:, :, ::1] cols, shape, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t B = shape[0], C = shape[1], H = shape[2], W = shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((B, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, oy, ox, iy, ix, row
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for oy in range(Ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= H:
                                continue
                            for ox in range(Wo):
                                ix = ox * stride + j - pad
                                if ix < 0 or ix >= W:
                                    continue
                                out[b, c, iy, ix] += cols[b, row, oy * Wo + ox]
    return out_arr


cdef inline void _corner(floating lx_in, floating ly_in, Py_ssize_t H, Py_ssize_t W,
                         Py_ssize_t* x0, Py_ssize_t* x1, Py_ssize_t* y0, Py_ssize_t* y1,
                         floating* lx, floating* ly, floating* gx, floating* gy) noexcept nogil:
    cdef double px = lx_in * W - 0.5
    cdef double py = ly_in * H - 0.5
    gx[0] = W
    gy[0] = H
    if px < 0:
        px = 0
        gx[0] = 0
    elif px > W - 1:
        px = W - 1
        gx[0] = 0
    if py < 0:
        py = 0
        gy[0] = 0
    elif py > H - 1:
        py = H - 1
        gy[0] = 0
    x0[0] = <Py_ssize_t>floor(px)
    y0[0] = <Py_ssize_t>floor(py)
    x1[0] = x0[0] + 1 if x0[0] + 1 < W else W - 1
    y1[0] = y0[0] + 1 if y0[0] + 1 < H else H - 1
    lx[0] = <floating>(px - x0[0])
    ly[0] = <floating>(py - y0[0])


def ms_deform_attn_forward(floating[:, :, :, ::1] value, cnp.int64_t[:, ::1] shapes,
                           cnp.int64_t[::1] starts, floating[:, :, :, :, :, ::1] loc,
                           floating[:, :, :, :, ::1] attw):
    cdef Py_ssize_t B = value.shape[0], M = value.shape[2], D = value.shape[3]
    cdef Py_ssize_t Q = loc.shape[1], L = loc.shape[3], P = loc.shape[4]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((B, Q, M, D), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, q, m, l, p, d, H, W, s0, x0, x1, y0, y1
    cdef Py_ssize_t i00, i01, i10, i11
    cdef floating lx, ly, gx, gy, a, w00, w01, w10, w11
    with nogil:
        for b in range(B):
            for q in range(Q):
                for m in range(M):
                    for l in range(L):
                        H = shapes[l, 0]
                        W = shapes[l, 1]
                        s0 = starts[l]
                        for p in range(P):
                            _corner(loc[b, q, m, l, p, 0], loc[b, q, m, l, p, 1], H, W,
                                    &x0, &x1, &y0, &y1, &lx, &ly, &gx, &gy)
                            a = attw[b, q, m, l, p]
                            w00 = a * (1 - ly) * (1 - lx)
                            w01 = a * (1 - ly) * lx
                            w10 = a * ly * (1 - lx)
                            w11 = a * ly * lx
                            i00 = s0 + y0 * W + x0
                            i01 = s0 + y0 * W + x1
                            i10 = s0 + y1 * W + x0
                            i11 = s0 + y1 * W + x1
                            for d in range(D):
                                out[b, q, m, d] += (w00 * value[b, i00, m, d] + w01 * value[b, i01, m, d]
                                                    + w10 * value[b, i10, m, d] + w11 * value[b, i11, m, d])
    return out_arr


def ms_deform_attn_backward(floating[:, :, :, ::1] value, cnp.int64_t[:, ::1] shapes,
                            cnp.int64_t[::1] starts, floating[:, :, :, :, :, ::1] loc,
                            floating[:, :, :, :, ::1] attw, floating[:, :, :, ::1] grad_out):
    cdef Py_ssize_t B = value.shape[0], S = value.shape[1], M = value.shape[2], D = value.shape[3]
    cdef Py_ssize_t Q = loc.shape[1], L = loc.shape[3], P = loc.shape[4]
    dtype = np.float32 if floating is float else np.float64
    gv_arr = np.zeros((B, S, M, D), dtype=dtype)
    gl_arr = np.zeros((B, Q, M, L, P, 2), dtype=dtype)
    ga_arr = np.zeros((B, Q, M, L, P), dtype=dtype)
    cdef floating[:, :, :, ::1] gv = gv_arr
    cdef floating[:, :, :, :, :, ::1] gl = gl_arr
    cdef floating[:, :, :, :, ::1] ga = ga_arr
    cdef Py_ssize_t b, q, m, l, p, d, H, W, s0, x0, x1, y0, y1
    cdef Py_ssize_t i00, i01, i10, i11
    cdef floating lx, ly, gx, gy, a, g, v00, v01, v10, v11, samp, gs, gt
    with nogil:
        for b in range(B):
            for q in range(Q):
                for m in range(M):
                    for l in range(L):
                        H = shapes[l, 0]
                        W = shapes[l, 1]
                        s0 = starts[l]
                        for p in range(P):
                            _corner(loc[b, q, m, l, p, 0], loc[b, q, m, l, p, 1], H, W,
                                    &x0, &x1, &y0, &y1, &lx, &ly, &gx, &gy)
                            a = attw[b, q, m, l, p]
                            i00 = s0 + y0 * W + x0
                            i01 = s0 + y0 * W + x1
                            i10 = s0 + y1 * W + x0
                            i11 = s0 + y1 * W + x1
                            samp = 0
                            gs = 0
                            gt = 0
                            for d in range(D):
                                g = grad_out[b, q, m, d]
                                v00 = value[b, i00, m, d]
                                v01 = value[b, i01, m, d]
                                v10 = value[b, i10, m, d]
                                v11 = value[b, i11, m, d]
                                samp += g * ((1 - ly) * (1 - lx) * v00 + (1 - ly) * lx * v01
                                             + ly * (1 - lx) * v10 + ly * lx * v11)
                                gs += g * ((1 - ly) * (v01 - v00) + ly * (v11 - v10))
                                gt += g * ((1 - lx) * (v10 - v00) + lx * (v11 - v01))
                                gv[b, i00, m, d] += a * (1 - ly) * (1 - lx) * g
                                gv[b, i01, m, d] += a * (1 - ly) * lx * g
                                gv[b, i10, m, d] += a * ly * (1 - lx) * g
                                gv[b, i11, m, d] += a * ly * lx * g
                            ga[b, q, m, l, p] = samp
                            gl[b, q, m, l, p, 0] = a * gs * gx
                            gl[b, q, m, l, p, 1] = a * gt * gy
    return gv_arr, gl_arr, ga_arr

"""Vectorised numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or disabled. Signatures and
results match ``_ckernels`` exactly (up to float summation order).
"""
import numpy as np


def im2col(x, kh, kw, stride, pad):
    """[B, C, H, W] -> [B, C*kh*kw, Ho*Wo], row order (c, i, j)."""
    B, C, H, W = x.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    return cols.reshape(B, C * kh * kw, Ho * Wo)


def col2im(cols, shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back into an image."""
    B, C, H, W = shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    cols = cols.reshape(B, C, kh, kw, Ho, Wo)
    out = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def _corners(loc, H, W):
    """Bilinear corner indices/weights for border-clamped sampling."""
    x = np.clip(loc[..., 0] * W - 0.5, 0.0, W - 1.0)
    y = np.clip(loc[..., 1] * H - 0.5, 0.0, H - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    lx = (x - x0).astype(loc.dtype)
    ly = (y - y0).astype(loc.dtype)
    return x0, x1, y0, y1, lx, ly


def _inside(loc, H, W):
    """d(clamped pixel coord)/d(loc) per axis: scale inside, 0 where clamped."""
    px = loc[..., 0] * W - 0.5
    py = loc[..., 1] * H - 0.5
    gx = np.where((px >= 0) & (px <= W - 1), W, 0).astype(loc.dtype)
    gy = np.where((py >= 0) & (py <= H - 1), H, 0).astype(loc.dtype)
    return gx, gy


def ms_deform_attn_forward(value, shapes, starts, loc, attw):
    """Multi-scale deformable sampling.

    value [B, S, M, D]; shapes [L, 2] as (H, W); starts [L]; loc [B, Q, M, L, P, 2]
    normalised (x, y); attw [B, Q, M, L, P]. Returns [B, Q, M, D].
    """
    B, S, M, D = value.shape
    Q = loc.shape[1]
    out = np.zeros((B, Q, M, D), dtype=value.dtype)
    bi = np.arange(B)[:, None, None, None]
    mi = np.arange(M)[None, None, :, None]
    for lvl, (H, W) in enumerate(shapes):
        H, W = int(H), int(W)
        v = value[:, starts[lvl] : starts[lvl] + H * W]
        x0, x1, y0, y1, lx, ly = _corners(loc[:, :, :, lvl], H, W)
        a = attw[:, :, :, lvl]
        for yy, xx, wt in (
            (y0, x0, (1 - ly) * (1 - lx)),
            (y0, x1, (1 - ly) * lx),
            (y1, x0, ly * (1 - lx)),
            (y1, x1, ly * lx),
        ):
            sampled = v[bi, yy * W + xx, mi]  # [B, Q, M, P, D]
            out += np.einsum("bqmp,bqmpd->bqmd", a * wt, sampled)
    return out


def ms_deform_attn_backward(value, shapes, starts, loc, attw, grad_out):
    """Gradients of :func:`ms_deform_attn_forward` wrt value, loc and attw."""
    B, S, M, D = value.shape
    Q = loc.shape[1]
    g_value = np.zeros_like(value)
    g_loc = np.zeros_like(loc)
    g_attw = np.zeros_like(attw)
    bi = np.broadcast_to(np.arange(B)[:, None, None, None], loc.shape[:3] + (loc.shape[4],))
    mi = np.broadcast_to(np.arange(M)[None, None, :, None], bi.shape)
    for lvl, (H, W) in enumerate(shapes):
        H, W = int(H), int(W)
        s0 = int(starts[lvl])
        v = value[:, s0 : s0 + H * W]
        x0, x1, y0, y1, lx, ly = _corners(loc[:, :, :, lvl], H, W)
        gx, gy = _inside(loc[:, :, :, lvl], H, W)
        a = attw[:, :, :, lvl]
        v00 = v[bi, y0 * W + x0, mi]
        v01 = v[bi, y0 * W + x1, mi]
        v10 = v[bi, y1 * W + x0, mi]
        v11 = v[bi, y1 * W + x1, mi]
        go = grad_out[:, :, :, None, :]  # [B, Q, M, 1, D]
        w00 = (1 - ly) * (1 - lx)
        w01 = (1 - ly) * lx
        w10 = ly * (1 - lx)
        w11 = ly * lx
        sampled = w00[..., None] * v00 + w01[..., None] * v01 + w10[..., None] * v10 + w11[..., None] * v11
        g_attw[:, :, :, lvl] = np.einsum("bqmpd,bqmd->bqmp", sampled, grad_out)
        gs = np.einsum("bqmd,bqmpd->bqmp", grad_out, v01 - v00) * (1 - ly) + np.einsum(
            "bqmd,bqmpd->bqmp", grad_out, v11 - v10
        ) * ly
        gt = np.einsum("bqmd,bqmpd->bqmp", grad_out, v10 - v00) * (1 - lx) + np.einsum(
            "bqmd,bqmpd->bqmp", grad_out, v11 - v01
        ) * lx
        g_loc[:, :, :, lvl, :, 0] = a * gs * gx
        g_loc[:, :, :, lvl, :, 1] = a * gt * gy
        ag = a[..., None] * go  # [B, Q, M, P, D]
        gv = g_value[:, s0 : s0 + H * W]
        for yy, xx, wt in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
            np.add.at(gv, (bi, yy * W + xx, mi), wt[..., None] * ag)
    return g_value, g_loc, g_attw

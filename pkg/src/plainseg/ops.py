"""Differentiable neural-network primitives on :class:`~plainseg.tensor.Tensor`.

Convolutions go through im2col + batched matmul; interpolation is expressed
as a pair of fixed interpolation matrices so it is exactly linear; the
multi-scale deformable sampling runs in the compiled kernel when available.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .tensor import (
    ShapeError,
    Tensor,
    _make,
    _sigmoid_np,
    gelu,
    matmul,
    permute,
    relu,
    reshape,
    softmax,
)

LN_EPS = 1e-5
BN_EPS = 1e-5


@dataclass(frozen=True)
class ConvParams:
    in_ch: int
    out_ch: int
    kernel: int = 3
    stride: int = 1
    padding: int | None = None
    groups: int = 1
    has_bias: bool = True

    def __post_init__(self):
        if self.in_ch % self.groups or self.out_ch % self.groups:
            raise ValueError(f"channels {self.in_ch}->{self.out_ch} not divisible by groups={self.groups}")
        if self.padding is None:
            object.__setattr__(self, "padding", self.kernel // 2)

    @property
    def weight_count(self) -> int:
        return self.out_ch * (self.in_ch // self.groups) * self.kernel * self.kernel

    @property
    def param_count(self) -> int:
        return self.weight_count + (self.out_ch if self.has_bias else 0)


@dataclass(frozen=True)
class AttentionParams:
    embed_dim: int
    num_heads: int

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


# ---------------------------------------------------------------- linear / conv


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear expects last dim {weight.shape[1]}, got {x.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gx = g @ wd if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xd.reshape(-1, xd.shape[-1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, inputs, "linear", bwd)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0,
           groups: int = 1) -> Tensor:
    """Grouped 2-D convolution. weight is [Cout, Cin/groups, k, k]."""
    B, C, H, W = x.shape
    Cout, Cg, kh, kw = weight.shape
    if C != Cg * groups:
        raise ShapeError(f"conv2d expects {Cg * groups} input channels, got {C}")
    if Cout % groups:
        raise ShapeError(f"out channels {Cout} not divisible by groups {groups}")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}")
    G = groups
    cols = _kernels.im2col(x.data, kh, kw, stride, padding).reshape(B, G, Cg * kh * kw, Ho * Wo)
    wmat = weight.data.reshape(G, Cout // G, Cg * kh * kw)
    out = np.matmul(wmat[None], cols).reshape(B, Cout, Ho, Wo)
    if bias is not None:
        out += bias.data.reshape(1, Cout, 1, 1)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        g4 = g.reshape(B, G, Cout // G, Ho * Wo)
        gx = gw = None
        if x.requires_grad:
            gcols = np.matmul(np.swapaxes(wmat, 1, 2)[None], g4).reshape(B, C * kh * kw, Ho * Wo)
            gx = _kernels.col2im(gcols, (B, C, H, W), kh, kw, stride, padding)
        if weight.requires_grad:
            gw = np.matmul(g4, np.swapaxes(cols, 2, 3)).sum(axis=0).reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out, inputs, "conv2d", bwd)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed convolution with kernel 2 and stride 2 (exact 2x up-sampling).

    weight is [Cin, Cout, 2, 2]; each input pixel writes one 2x2 output block.
    """
    Cin, Cout, kh, kw = weight.shape
    if (kh, kw, stride) != (2, 2, 2):
        raise ValueError("conv_transpose2d supports kernel 2, stride 2 only")
    B, C, H, W = x.shape
    if C != Cin:
        raise ShapeError(f"conv_transpose2d expects {Cin} input channels, got {C}")
    xd, wd = x.data, weight.data
    out = np.einsum("bchw,cokl->bohkwl", xd, wd, optimize=True).reshape(B, Cout, 2 * H, 2 * W)
    if bias is not None:
        out += bias.data.reshape(1, Cout, 1, 1)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        g6 = g.reshape(B, Cout, H, 2, W, 2)
        gx = np.einsum("bohkwl,cokl->bchw", g6, wd, optimize=True) if x.requires_grad else None
        gw = np.einsum("bohkwl,bchw->cokl", g6, xd, optimize=True) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out, inputs, "conv_transpose2d", bwd)


# ---------------------------------------------------------------- resampling


@functools.lru_cache(maxsize=64)
def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """[n_out, n_in] linear interpolation weights, half-pixel centres, edge clamp."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    m.setflags(write=False)
    return m


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of the last two axes to ``size``."""
    H, W = x.shape[-2:]
    Ho, Wo = int(size[0]), int(size[1])
    if (H, W) == (Ho, Wo):
        return x
    ah = interp_matrix(H, Ho).astype(x.data.dtype)
    aw = interp_matrix(W, Wo).astype(x.data.dtype)
    out = ah @ x.data @ aw.T
    return _make(out, (x,), "resize_bilinear", lambda g: (ah.T @ g @ aw,))


def bilinear_upsample(x: Tensor, scale: int = 2) -> Tensor:
    if int(scale) != scale or scale < 2:
        raise ValueError(f"scale must be an integer >= 2, got {scale}")
    H, W = x.shape[-2:]
    return resize_bilinear(x, (H * int(scale), W * int(scale)))


def max_pool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """2x2/2 max pooling; on ties the first element in row-major order wins."""
    if kernel != 2 or stride != 2:
        raise ValueError("max_pool2d supports kernel 2, stride 2 only")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"max_pool2d needs even spatial dims, got {H}x{W}")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        return (gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W),)

    return _make(out, (x,), "max_pool2d", bwd)


# ---------------------------------------------------------------- normalisation


def layer_norm(x: Tensor, gamma: Tensor | None, beta: Tensor | None, axis: int = -1, eps: float = LN_EPS) -> Tensor:
    """Normalise over one axis; ``axis=1`` gives channel-wise LN on NCHW maps."""
    ax = axis % x.ndim
    n = x.shape[ax]
    if gamma is not None and gamma.shape != (n,):
        raise ShapeError(f"layer_norm over dim of size {n} got gamma {gamma.shape}")
    bshape = [1] * x.ndim
    bshape[ax] = n
    xd = x.data
    mu = xd.mean(axis=ax, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data.reshape(bshape) if gamma is not None else None
    out = xhat * gd if gd is not None else xhat.copy()
    if beta is not None:
        out = out + beta.data.reshape(bshape)
    inputs = [x] + [t for t in (gamma, beta) if t is not None]
    red = tuple(d for d in range(x.ndim) if d != ax)

    def bwd(g):
        gxhat = g * gd if gd is not None else g
        gx = rstd * (gxhat - gxhat.mean(axis=ax, keepdims=True) - xhat * (gxhat * xhat).mean(axis=ax, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=red))
        if beta is not None:
            grads.append(g.sum(axis=red))
        return tuple(grads)

    return _make(out.astype(xd.dtype, copy=False), inputs, "layer_norm", bwd)


def batch_norm(x: Tensor, running_mean: np.ndarray, running_var: np.ndarray, gamma: Tensor | None,
               beta: Tensor | None, training: bool, momentum: float = 0.1, eps: float = BN_EPS) -> Tensor:
    """Batch norm over all axes but 1. Training mode updates running stats in place."""
    C = x.shape[1]
    red = tuple(d for d in range(x.ndim) if d != 1)
    bshape = [1] * x.ndim
    bshape[1] = C
    xd = x.data
    if training:
        mu = xd.mean(axis=red, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=red, keepdims=True)
        n = xd.size // C
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(C)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(C) * (n / max(n - 1, 1))
    else:
        mu = running_mean.reshape(bshape).astype(xd.dtype)
        xc = xd - mu
        var = running_var.reshape(bshape).astype(xd.dtype)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data.reshape(bshape) if gamma is not None else None
    out = xhat * gd if gd is not None else xhat.copy()
    if beta is not None:
        out = out + beta.data.reshape(bshape)
    inputs = [x] + [t for t in (gamma, beta) if t is not None]

    def bwd(g):
        gxhat = g * gd if gd is not None else g
        if training:
            gx = rstd * (gxhat - gxhat.mean(axis=red, keepdims=True)
                         - xhat * (gxhat * xhat).mean(axis=red, keepdims=True))
        else:
            gx = gxhat * rstd
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=red))
        if beta is not None:
            grads.append(g.sum(axis=red))
        return tuple(grads)

    return _make(out.astype(xd.dtype, copy=False), inputs, "batch_norm", bwd)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    if kind in ("identity", "none"):
        return x
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- attention


def safeguard_mask(masked: np.ndarray) -> np.ndarray:
    """Unmask every row whose keys are all masked (boolean, True = masked)."""
    masked = np.array(masked, dtype=bool)
    full = masked.all(axis=-1)
    masked[full] = False
    return masked


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, w_q: Tensor, b_q: Tensor | None, w_k: Tensor,
                         b_k: Tensor | None, w_v: Tensor, b_v: Tensor | None, w_o: Tensor, b_o: Tensor | None,
                         num_heads: int, attn_mask: np.ndarray | None = None, attn_bias: Tensor | None = None,
                         return_weights: bool = False):
    """Scaled dot-product attention with input and output projections.

    ``attn_mask`` is boolean ``[B, Nq, Nk]`` (True = masked) or an additive float
    array; rows with no visible key fall back to unmasked. ``attn_bias`` is an
    additive, differentiable ``[heads, Nq, Nk]`` bias (relative positions).
    """
    B, Nq, D = q.shape
    Nk = k.shape[1]
    if D != w_q.shape[1] or k.shape[-1] != w_k.shape[1]:
        raise ShapeError(f"attention width mismatch: q {q.shape}, k {k.shape}, proj {w_q.shape}")
    if v.shape[1] != Nk:
        raise ShapeError("keys and values differ in length")
    E = w_q.shape[0]
    h = num_heads
    if E % h:
        raise ShapeError(f"embed dim {E} not divisible by {h} heads")
    hd = E // h
    qp = permute(reshape(linear(q, w_q, b_q), (B, Nq, h, hd)), (0, 2, 1, 3))
    kp = permute(reshape(linear(k, w_k, b_k), (B, Nk, h, hd)), (0, 2, 3, 1))
    vp = permute(reshape(linear(v, w_v, b_v), (B, Nk, h, hd)), (0, 2, 1, 3))
    scores = matmul(qp, kp) * (1.0 / np.sqrt(hd))
    if attn_bias is not None:
        scores = scores + attn_bias
    add_mask = None
    if attn_mask is not None:
        m = np.asarray(attn_mask)
        if m.dtype == bool:
            m = safeguard_mask(m)
            add_mask = np.where(m, -np.inf, 0.0)
        else:
            m = np.array(m, dtype=np.float64)
            dead = np.isneginf(m).all(axis=-1)
            m[dead] = 0.0
            add_mask = m
        if add_mask.ndim == 3:
            add_mask = add_mask[:, None]
        add_mask = add_mask.astype(scores.data.dtype)
    attn = softmax(scores, axis=-1, mask=add_mask)
    ctx = reshape(permute(matmul(attn, vp), (0, 2, 1, 3)), (B, Nq, E))
    out = linear(ctx, w_o, b_o)
    return (out, attn) if return_weights else out


def ms_deformable_attention(value: Tensor, spatial_shapes, sampling_locations: Tensor,
                            attention_weights: Tensor) -> Tensor:
    """Sum of attention-weighted bilinear samples across levels and points.

    value [B, S, heads, Dh] (levels flattened and concatenated);
    sampling_locations [B, Q, heads, L, P, 2] normalised (x, y) in [0, 1], clamped
    to the border; attention_weights [B, Q, heads, L, P]. Returns [B, Q, heads*Dh].
    """
    shapes = np.asarray(spatial_shapes, dtype=np.int64).reshape(-1, 2)
    B, S, M, Dh = value.shape
    if int((shapes[:, 0] * shapes[:, 1]).sum()) != S:
        raise ShapeError(f"level shapes {shapes.tolist()} do not cover {S} value tokens")
    L = sampling_locations.shape[3]
    if L != len(shapes) or attention_weights.shape != sampling_locations.shape[:-1]:
        raise ShapeError("level count or weight shape mismatch in deformable attention")
    starts = np.concatenate([[0], np.cumsum(shapes[:, 0] * shapes[:, 1])[:-1]]).astype(np.int64)
    vd, ld, ad = value.data, sampling_locations.data, attention_weights.data
    out = _kernels.ms_deform_attn_forward(vd, shapes, starts, ld, ad)
    Q = out.shape[1]

    def bwd(g):
        gv, gl, ga = _kernels.ms_deform_attn_backward(vd, shapes, starts, ld, ad, g.reshape(B, Q, M, Dh))
        return gv, gl, ga

    return _make(out.reshape(B, Q, M * Dh), (value, sampling_locations, attention_weights), "ms_deform_attn", bwd)


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return _sigmoid_np(np.asarray(x))

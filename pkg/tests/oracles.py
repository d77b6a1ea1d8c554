"""Independent loop implementations used as reference oracles."""
import itertools

import numpy as np


def conv2d_loop(x, w, b, stride, pad, groups):
    B, C, H, W = x.shape
    Co, Cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, Co, Ho, Wo))
    per = Co // groups
    for bb, o, y, xx in itertools.product(range(B), range(Co), range(Ho), range(Wo)):
        g = o // per
        acc = 0.0
        for c in range(Cg):
            for i in range(kh):
                for j in range(kw):
                    acc += w[o, c, i, j] * xp[bb, g * Cg + c, y * stride + i, xx * stride + j]
        out[bb, o, y, xx] = acc + (b[o] if b is not None else 0.0)
    return out


def deconv_loop(x, w, b):
    B, C, H, W = x.shape
    Co = w.shape[1]
    out = np.zeros((B, Co, 2 * H, 2 * W))
    for bb, c, h, ww, o, k, l in itertools.product(range(B), range(C), range(H), range(W), range(Co), range(2), range(2)):
        out[bb, o, 2 * h + k, 2 * ww + l] += x[bb, c, h, ww] * w[c, o, k, l]
    if b is not None:
        out += b[None, :, None, None]
    return out


def bilinear_loop(x, Ho, Wo):
    H, W = x.shape[-2:]

    def src(i, n_in, n_out):
        s = min(max((i + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1.0)
        i0 = int(np.floor(s))
        return i0, min(i0 + 1, n_in - 1), s - i0

    out = np.zeros(x.shape[:-2] + (Ho, Wo))
    for i in range(Ho):
        y0, y1, fy = src(i, H, Ho)
        for j in range(Wo):
            x0, x1, fx = src(j, W, Wo)
            out[..., i, j] = ((1 - fy) * ((1 - fx) * x[..., y0, x0] + fx * x[..., y0, x1])
                              + fy * ((1 - fx) * x[..., y1, x0] + fx * x[..., y1, x1]))
    return out


def attention_loop(q, k, v, wq, bq, wk, bk, wv, bv, wo, bo, heads, mask=None):
    """mask: boolean [B, Nq, Nk], True = masked; all-masked rows are unmasked."""
    B, Nq, _ = q.shape
    Nk = k.shape[1]
    E = wq.shape[0]
    hd = E // heads
    Q = q @ wq.T + bq
    K = k @ wk.T + bk
    V = v @ wv.T + bv
    ctx = np.zeros((B, Nq, E))
    for b in range(B):
        for h in range(heads):
            sl = slice(h * hd, (h + 1) * hd)
            for i in range(Nq):
                visible = [j for j in range(Nk) if mask is None or not mask[b, i, j]]
                if not visible:
                    visible = list(range(Nk))
                s = np.array([Q[b, i, sl] @ K[b, j, sl] / np.sqrt(hd) for j in visible])
                p = np.exp(s - s.max())
                p /= p.sum()
                ctx[b, i, sl] = sum(pj * V[b, j, sl] for pj, j in zip(p, visible))
    return ctx @ wo.T + bo


def msda_loop(value, shapes, loc, attw):
    """value [B,S,M,D]; shapes [(H,W)]; loc [B,Q,M,L,P,2] (x,y) in [0,1]; attw [B,Q,M,L,P]."""
    B, S, M, D = value.shape
    _, Q, _, L, P, _ = loc.shape
    starts = np.concatenate([[0], np.cumsum([h * w for h, w in shapes])[:-1]])
    out = np.zeros((B, Q, M, D))
    for b, q, m, l, p in itertools.product(range(B), range(Q), range(M), range(L), range(P)):
        H, W = shapes[l]
        px = min(max(loc[b, q, m, l, p, 0] * W - 0.5, 0.0), W - 1.0)
        py = min(max(loc[b, q, m, l, p, 1] * H - 0.5, 0.0), H - 1.0)
        x0, y0 = int(np.floor(px)), int(np.floor(py))
        x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
        fx, fy = px - x0, py - y0

        def v(yy, xx):
            return value[b, starts[l] + yy * W + xx, m]

        s = (1 - fy) * (1 - fx) * v(y0, x0) + (1 - fy) * fx * v(y0, x1) + fy * (1 - fx) * v(y1, x0) + fy * fx * v(y1, x1)
        out[b, q, m] += attw[b, q, m, l, p] * s
    return out


def brute_force_assignment(cost):
    """Minimum total cost over all injective maps of columns to rows."""
    Q, G = cost.shape
    best, best_rows = np.inf, None
    for rows in itertools.permutations(range(Q), G):
        c = sum(cost[r, g] for g, r in enumerate(rows))
        if c < best:
            best, best_rows = c, rows
    return best, np.array(best_rows)


def confusion_loop(gt, pred, K, ignore=255):
    m = np.zeros((K, K), dtype=np.int64)
    for g, p in zip(np.ravel(gt), np.ravel(pred)):
        if g != ignore:
            m[g, p] += 1
    return m

"""Vectorised numpy implementations of the numeric kernels.

Fallback path used when numba is unavailable or when
``SEMSTEREO_BACKEND=numpy``. Accumulation order is fixed (kernel-tap
loops, ``np.add.at`` scatters), so results are reproducible run to run.
The numba twins in ``numba_backend`` compute the same quantities with
explicit loops; the two backends agree up to floating summation order.
"""

from __future__ import annotations

import numpy as np


# ---------------------------------------------------------------------------
# 2D convolution

def conv2d_fwd(x, w, b, sh, sw, ph, pw):
    B, C, H, W = x.shape
    O, _, KH, KW = w.shape
    Ho = (H + 2 * ph - KH) // sh + 1
    Wo = (W + 2 * pw - KW) // sw + 1
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    y = np.zeros((B, O, Ho, Wo), dtype=x.dtype)
    for ki in range(KH):
        for kj in range(KW):
            xs = xp[:, :, ki:ki + sh * Ho:sh, kj:kj + sw * Wo:sw]
            y += np.einsum("bcij,oc->boij", xs, w[:, :, ki, kj])
    y += b.reshape(1, O, 1, 1)
    return y


def conv2d_bwd_x(dy, w, B, C, H, W, sh, sw, ph, pw):
    O, _, KH, KW = w.shape
    Ho, Wo = dy.shape[2], dy.shape[3]
    dxp = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=dy.dtype)
    for ki in range(KH):
        for kj in range(KW):
            dxp[:, :, ki:ki + sh * Ho:sh, kj:kj + sw * Wo:sw] += np.einsum(
                "boij,oc->bcij", dy, w[:, :, ki, kj])
    return dxp[:, :, ph:ph + H, pw:pw + W]


def conv2d_bwd_w(dy, x, KH, KW, sh, sw, ph, pw):
    B, C, H, W = x.shape
    O = dy.shape[1]
    Ho, Wo = dy.shape[2], dy.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    dw = np.zeros((O, C, KH, KW), dtype=dy.dtype)
    for ki in range(KH):
        for kj in range(KW):
            xs = xp[:, :, ki:ki + sh * Ho:sh, kj:kj + sw * Wo:sw]
            dw[:, :, ki, kj] = np.einsum("boij,bcij->oc", dy, xs)
    return dw


# ---------------------------------------------------------------------------
# 3D convolution (volumes laid out B x C x D x H x W)

def conv3d_fwd(x, w, b, pd, ph, pw):
    B, C, D, H, W = x.shape
    O, _, KD, KH, KW = w.shape
    Do = D + 2 * pd - KD + 1
    Ho = H + 2 * ph - KH + 1
    Wo = W + 2 * pw - KW + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    y = np.zeros((B, O, Do, Ho, Wo), dtype=x.dtype)
    for kd in range(KD):
        for ki in range(KH):
            for kj in range(KW):
                xs = xp[:, :, kd:kd + Do, ki:ki + Ho, kj:kj + Wo]
                y += np.einsum("bcdij,oc->bodij", xs, w[:, :, kd, ki, kj])
    y += b.reshape(1, O, 1, 1, 1)
    return y


def conv3d_bwd_x(dy, w, B, C, D, H, W, pd, ph, pw):
    O, _, KD, KH, KW = w.shape
    Do, Ho, Wo = dy.shape[2], dy.shape[3], dy.shape[4]
    dxp = np.zeros((B, C, D + 2 * pd, H + 2 * ph, W + 2 * pw), dtype=dy.dtype)
    for kd in range(KD):
        for ki in range(KH):
            for kj in range(KW):
                dxp[:, :, kd:kd + Do, ki:ki + Ho, kj:kj + Wo] += np.einsum(
                    "bodij,oc->bcdij", dy, w[:, :, kd, ki, kj])
    return dxp[:, :, pd:pd + D, ph:ph + H, pw:pw + W]


def conv3d_bwd_w(dy, x, KD, KH, KW, pd, ph, pw):
    B, C, D, H, W = x.shape
    O = dy.shape[1]
    Do, Ho, Wo = dy.shape[2], dy.shape[3], dy.shape[4]
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    dw = np.zeros((O, C, KD, KH, KW), dtype=dy.dtype)
    for kd in range(KD):
        for ki in range(KH):
            for kj in range(KW):
                xs = xp[:, :, kd:kd + Do, ki:ki + Ho, kj:kj + Wo]
                dw[:, :, kd, ki, kj] = np.einsum("bodij,bcdij->oc", dy, xs)
    return dw


# ---------------------------------------------------------------------------
# 2x2 max pooling

def maxpool2x2_fwd(x):
    B, C, H, W = x.shape
    v = (x.reshape(B, C, H // 2, 2, W // 2, 2)
          .transpose(0, 1, 2, 4, 3, 5)
          .reshape(B, C, H // 2, W // 2, 4))
    # argmax ties resolve to the first window element, same scan order as
    # the numba twin
    idx = v.argmax(axis=4).astype(np.uint8)
    y = np.take_along_axis(v, idx[..., None].astype(np.int64), axis=4)[..., 0]
    return y, idx


def maxpool2x2_bwd(dy, idx, H, W):
    B, C, Ho, Wo = dy.shape
    dv = np.zeros((B, C, Ho, Wo, 4), dtype=dy.dtype)
    np.put_along_axis(dv, idx[..., None].astype(np.int64), dy[..., None], axis=4)
    return (dv.reshape(B, C, Ho, Wo, 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(B, C, H, W))


# ---------------------------------------------------------------------------
# Bilinear upsampling, align-corners off: source = (i + 0.5)/f - 0.5

def _lin_idx(n_out, factor, n_in):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) / factor - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i0c = np.clip(i0, 0, n_in - 1)
    i1c = np.clip(i0 + 1, 0, n_in - 1)
    return i0c, i1c, frac


def upsample_bilinear_fwd(x, factor):
    B, C, H, W = x.shape
    r0, r1, fy = _lin_idx(H * factor, factor, H)
    c0, c1, fx = _lin_idx(W * factor, factor, W)
    fy = fy.astype(x.dtype)[None, None, :, None]
    fx = fx.astype(x.dtype)
    rows = x[:, :, r0, :] * (1 - fy) + x[:, :, r1, :] * fy
    return rows[:, :, :, c0] * (1 - fx) + rows[:, :, :, c1] * fx


def upsample_bilinear_bwd(dy, factor, H, W):
    B, C, Ho, Wo = dy.shape
    r0, r1, fy = _lin_idx(Ho, factor, H)
    c0, c1, fx = _lin_idx(Wo, factor, W)
    fy = fy.astype(dy.dtype)
    fx = fx.astype(dy.dtype)
    drows = np.zeros((B, C, Ho, W), dtype=dy.dtype)
    np.add.at(drows, (Ellipsis, c0), dy * (1 - fx))
    np.add.at(drows, (Ellipsis, c1), dy * fx)
    t = drows.transpose(0, 1, 3, 2)
    dxt = np.zeros((B, C, W, H), dtype=dy.dtype)
    np.add.at(dxt, (Ellipsis, r0), t * (1 - fy))
    np.add.at(dxt, (Ellipsis, r1), t * fy)
    return dxt.transpose(0, 1, 3, 2)


# ---------------------------------------------------------------------------
# Horizontal disparity warp, border clamp

def _warp_coords(disp, W):
    sx = np.arange(W, dtype=disp.dtype) - disp[:, 0]   # [B, H, W]
    x0 = np.floor(sx).astype(np.int64)
    frac = sx - x0
    x0c = np.clip(x0, 0, W - 1)
    x1c = np.clip(x0 + 1, 0, W - 1)
    return x0c, x1c, frac


def warp_width_fwd(x, disp):
    B, C, H, W = x.shape
    x0c, x1c, frac = _warp_coords(disp, W)
    i0 = np.broadcast_to(x0c[:, None], (B, C, H, W))
    i1 = np.broadcast_to(x1c[:, None], (B, C, H, W))
    g0 = np.take_along_axis(x, i0, axis=3)
    g1 = np.take_along_axis(x, i1, axis=3)
    a = frac[:, None].astype(x.dtype)
    return g0 * (1 - a) + g1 * a


def warp_width_bwd(dy, x, disp):
    B, C, H, W = x.shape
    x0c, x1c, frac = _warp_coords(disp, W)
    i0 = np.broadcast_to(x0c[:, None], (B, C, H, W))
    i1 = np.broadcast_to(x1c[:, None], (B, C, H, W))
    a = frac[:, None].astype(x.dtype)
    bi = np.arange(B)[:, None, None, None]
    ci = np.arange(C)[None, :, None, None]
    hi = np.arange(H)[None, None, :, None]
    dx = np.zeros_like(x)
    np.add.at(dx, (bi, ci, hi, i0), dy * (1 - a))
    np.add.at(dx, (bi, ci, hi, i1), dy * a)
    g0 = np.take_along_axis(x, i0, axis=3)
    g1 = np.take_along_axis(x, i1, axis=3)
    ddisp = -(dy * (g1 - g0)).sum(axis=1, keepdims=True)
    return dx, ddisp


# ---------------------------------------------------------------------------
# Distance-based cost volume: mean_c |fL(x) - fR(x - d)|, zero fill

def distance_volume_fwd(fl, fr, offsets):
    B, C, H, W = fl.shape
    D = offsets.shape[0]
    costs = np.empty((B, D, H, W), dtype=fl.dtype)
    for di in range(D):
        off = int(offsets[di])
        # hypotheses beyond the width leave no overlap: pure zero-fill
        if off >= 0:
            lo = min(off, W)
            costs[:, di, :, lo:] = np.abs(
                fl[:, :, :, lo:] - fr[:, :, :, :W - lo]).mean(axis=1)
            costs[:, di, :, :lo] = np.abs(fl[:, :, :, :lo]).mean(axis=1)
        else:
            k = min(-off, W)
            costs[:, di, :, :W - k] = np.abs(
                fl[:, :, :, :W - k] - fr[:, :, :, k:]).mean(axis=1)
            costs[:, di, :, W - k:] = np.abs(fl[:, :, :, W - k:]).mean(axis=1)
    return costs


def distance_volume_bwd(dcost, fl, fr, offsets):
    B, C, H, W = fl.shape
    D = offsets.shape[0]
    dfl = np.zeros_like(fl)
    dfr = np.zeros_like(fr)
    inv_c = fl.dtype.type(1.0 / C)
    for di in range(D):
        off = int(offsets[di])
        if off >= 0:
            lo = min(off, W)
            s = np.sign(fl[:, :, :, lo:] - fr[:, :, :, :W - lo])
            g = dcost[:, di:di + 1, :, lo:] * inv_c
            dfl[:, :, :, lo:] += s * g
            dfr[:, :, :, :W - lo] -= s * g
            dfl[:, :, :, :lo] += (np.sign(fl[:, :, :, :lo])
                                  * dcost[:, di:di + 1, :, :lo] * inv_c)
        else:
            k = min(-off, W)
            s = np.sign(fl[:, :, :, :W - k] - fr[:, :, :, k:])
            g = dcost[:, di:di + 1, :, :W - k] * inv_c
            dfl[:, :, :, :W - k] += s * g
            dfr[:, :, :, k:] -= s * g
            dfl[:, :, :, W - k:] += (np.sign(fl[:, :, :, W - k:])
                                     * dcost[:, di:di + 1, :, W - k:] * inv_c)
    return dfl, dfr

"""Numba-compiled loop kernels, the default backend.

Same signatures and semantics as ``numpy_backend``; plain nested loops,
single-threaded with a fixed accumulation order so results are bitwise
reproducible run to run. ``cache=True`` persists compiled code next to
the source, so the JIT cost is paid once per machine and dtype.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _j_range(kj, pw, sw, W, Wo):
    # output columns whose input column j*sw + kj - pw stays inside [0, W)
    jlo = 0
    while jlo < Wo and jlo * sw + kj - pw < 0:
        jlo += 1
    jhi = Wo
    while jhi > jlo and (jhi - 1) * sw + kj - pw >= W:
        jhi -= 1
    return jlo, jhi


@njit(cache=True)
def conv2d_fwd(x, w, b, sh, sw, ph, pw):
    B, C, H, W = x.shape
    O, _, KH, KW = w.shape
    Ho = (H + 2 * ph - KH) // sh + 1
    Wo = (W + 2 * pw - KW) // sw + 1
    y = np.zeros((B, O, Ho, Wo), dtype=x.dtype)
    for bb in range(B):
        for o in range(O):
            for c in range(C):
                for ki in range(KH):
                    for kj in range(KW):
                        wv = w[o, c, ki, kj]
                        jlo, jhi = _j_range(kj, pw, sw, W, Wo)
                        for i in range(Ho):
                            ii = i * sh + ki - ph
                            if ii < 0 or ii >= H:
                                continue
                            for j in range(jlo, jhi):
                                y[bb, o, i, j] += x[bb, c, ii, j * sw + kj - pw] * wv
            for i in range(Ho):
                for j in range(Wo):
                    y[bb, o, i, j] += b[o]
    return y


@njit(cache=True)
def conv2d_bwd_x(dy, w, B, C, H, W, sh, sw, ph, pw):
    O, _, KH, KW = w.shape
    Ho, Wo = dy.shape[2], dy.shape[3]
    dx = np.zeros((B, C, H, W), dtype=dy.dtype)
    for bb in range(B):
        for o in range(O):
            for c in range(C):
                for ki in range(KH):
                    for kj in range(KW):
                        wv = w[o, c, ki, kj]
                        jlo, jhi = _j_range(kj, pw, sw, W, Wo)
                        for i in range(Ho):
                            ii = i * sh + ki - ph
                            if ii < 0 or ii >= H:
                                continue
                            for j in range(jlo, jhi):
                                dx[bb, c, ii, j * sw + kj - pw] += dy[bb, o, i, j] * wv
    return dx


@njit(cache=True)
def conv2d_bwd_w(dy, x, KH, KW, sh, sw, ph, pw):
    B, C, H, W = x.shape
    O = dy.shape[1]
    Ho, Wo = dy.shape[2], dy.shape[3]
    dw = np.zeros((O, C, KH, KW), dtype=dy.dtype)
    for bb in range(B):
        for o in range(O):
            for c in range(C):
                for ki in range(KH):
                    for kj in range(KW):
                        jlo, jhi = _j_range(kj, pw, sw, W, Wo)
                        acc = 0.0
                        for i in range(Ho):
                            ii = i * sh + ki - ph
                            if ii < 0 or ii >= H:
                                continue
                            for j in range(jlo, jhi):
                                acc += dy[bb, o, i, j] * x[bb, c, ii, j * sw + kj - pw]
                        dw[o, c, ki, kj] += acc
    return dw


@njit(cache=True)
def conv3d_fwd(x, w, b, pd, ph, pw):
    B, C, D, H, W = x.shape
    O, _, KD, KH, KW = w.shape
    Do = D + 2 * pd - KD + 1
    Ho = H + 2 * ph - KH + 1
    Wo = W + 2 * pw - KW + 1
    y = np.zeros((B, O, Do, Ho, Wo), dtype=x.dtype)
    for bb in range(B):
        for o in range(O):
            for c in range(C):
                for kd in range(KD):
                    for ki in range(KH):
                        for kj in range(KW):
                            wv = w[o, c, kd, ki, kj]
                            jlo, jhi = _j_range(kj, pw, 1, W, Wo)
                            for d in range(Do):
                                dd = d + kd - pd
                                if dd < 0 or dd >= D:
                                    continue
                                for i in range(Ho):
                                    ii = i + ki - ph
                                    if ii < 0 or ii >= H:
                                        continue
                                    for j in range(jlo, jhi):
                                        y[bb, o, d, i, j] += x[bb, c, dd, ii, j + kj - pw] * wv
            for d in range(Do):
                for i in range(Ho):
                    for j in range(Wo):
                        y[bb, o, d, i, j] += b[o]
    return y


@njit(cache=True)
def conv3d_bwd_x(dy, w, B, C, D, H, W, pd, ph, pw):
    O, _, KD, KH, KW = w.shape
    Do, Ho, Wo = dy.shape[2], dy.shape[3], dy.shape[4]
    dx = np.zeros((B, C, D, H, W), dtype=dy.dtype)
    for bb in range(B):
        for o in range(O):
            for c in range(C):
                for kd in range(KD):
                    for ki in range(KH):
                        for kj in range(KW):
                            wv = w[o, c, kd, ki, kj]
                            jlo, jhi = _j_range(kj, pw, 1, W, Wo)
                            for d in range(Do):
                                dd = d + kd - pd
                                if dd < 0 or dd >= D:
                                    continue
                                for i in range(Ho):
                                    ii = i + ki - ph
                                    if ii < 0 or ii >= H:
                                        continue
                                    for j in range(jlo, jhi):
                                        dx[bb, c, dd, ii, j + kj - pw] += dy[bb, o, d, i, j] * wv
    return dx


@njit(cache=True)
def conv3d_bwd_w(dy, x, KD, KH, KW, pd, ph, pw):
    B, C, D, H, W = x.shape
    O = dy.shape[1]
    Do, Ho, Wo = dy.shape[2], dy.shape[3], dy.shape[4]
    dw = np.zeros((O, C, KD, KH, KW), dtype=dy.dtype)
    for bb in range(B):
        for o in range(O):
            for c in range(C):
                for kd in range(KD):
                    for ki in range(KH):
                        for kj in range(KW):
                            jlo, jhi = _j_range(kj, pw, 1, W, Wo)
                            acc = 0.0
                            for d in range(Do):
                                dd = d + kd - pd
                                if dd < 0 or dd >= D:
                                    continue
                                for i in range(Ho):
                                    ii = i + ki - ph
                                    if ii < 0 or ii >= H:
                                        continue
                                    for j in range(jlo, jhi):
                                        acc += dy[bb, o, d, i, j] * x[bb, c, dd, ii, j + kj - pw]
                            dw[o, c, kd, ki, kj] += acc
    return dw


@njit(cache=True)
def maxpool2x2_fwd(x):
    B, C, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    y = np.empty((B, C, Ho, Wo), dtype=x.dtype)
    idx = np.empty((B, C, Ho, Wo), dtype=np.uint8)
    for bb in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    best = x[bb, c, 2 * i, 2 * j]
                    k = np.uint8(0)
                    for di in range(2):
                        for dj in range(2):
                            v = x[bb, c, 2 * i + di, 2 * j + dj]
                            if v > best:
                                best = v
                                k = np.uint8(2 * di + dj)
                    y[bb, c, i, j] = best
                    idx[bb, c, i, j] = k
    return y, idx


@njit(cache=True)
def maxpool2x2_bwd(dy, idx, H, W):
    B, C, Ho, Wo = dy.shape
    dx = np.zeros((B, C, H, W), dtype=dy.dtype)
    for bb in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    k = idx[bb, c, i, j]
                    dx[bb, c, 2 * i + k // 2, 2 * j + k % 2] = dy[bb, c, i, j]
    return dx


@njit(cache=True)
def upsample_bilinear_fwd(x, factor):
    B, C, H, W = x.shape
    Ho, Wo = H * factor, W * factor
    y = np.empty((B, C, Ho, Wo), dtype=x.dtype)
    for bb in range(B):
        for c in range(C):
            for i in range(Ho):
                sy = (i + 0.5) / factor - 0.5
                i0 = int(np.floor(sy))
                fy = sy - i0
                i0c = min(max(i0, 0), H - 1)
                i1c = min(max(i0 + 1, 0), H - 1)
                for j in range(Wo):
                    sx = (j + 0.5) / factor - 0.5
                    j0 = int(np.floor(sx))
                    fx = sx - j0
                    j0c = min(max(j0, 0), W - 1)
                    j1c = min(max(j0 + 1, 0), W - 1)
                    top = x[bb, c, i0c, j0c] * (1 - fx) + x[bb, c, i0c, j1c] * fx
                    bot = x[bb, c, i1c, j0c] * (1 - fx) + x[bb, c, i1c, j1c] * fx
                    y[bb, c, i, j] = top * (1 - fy) + bot * fy
    return y


@njit(cache=True)
def upsample_bilinear_bwd(dy, factor, H, W):
    B, C, Ho, Wo = dy.shape
    dx = np.zeros((B, C, H, W), dtype=dy.dtype)
    for bb in range(B):
        for c in range(C):
            for i in range(Ho):
                sy = (i + 0.5) / factor - 0.5
                i0 = int(np.floor(sy))
                fy = sy - i0
                i0c = min(max(i0, 0), H - 1)
                i1c = min(max(i0 + 1, 0), H - 1)
                for j in range(Wo):
                    sx = (j + 0.5) / factor - 0.5
                    j0 = int(np.floor(sx))
                    fx = sx - j0
                    j0c = min(max(j0, 0), W - 1)
                    j1c = min(max(j0 + 1, 0), W - 1)
                    g = dy[bb, c, i, j]
                    dx[bb, c, i0c, j0c] += g * (1 - fy) * (1 - fx)
                    dx[bb, c, i0c, j1c] += g * (1 - fy) * fx
                    dx[bb, c, i1c, j0c] += g * fy * (1 - fx)
                    dx[bb, c, i1c, j1c] += g * fy * fx
    return dx


@njit(cache=True)
def warp_width_fwd(x, disp):
    B, C, H, W = x.shape
    y = np.empty_like(x)
    for bb in range(B):
        for i in range(H):
            for j in range(W):
                sx = j - disp[bb, 0, i, j]
                x0 = int(np.floor(sx))
                a = sx - x0
                x0c = min(max(x0, 0), W - 1)
                x1c = min(max(x0 + 1, 0), W - 1)
                for c in range(C):
                    y[bb, c, i, j] = x[bb, c, i, x0c] * (1 - a) + x[bb, c, i, x1c] * a
    return y


@njit(cache=True)
def warp_width_bwd(dy, x, disp):
    B, C, H, W = x.shape
    dx = np.zeros_like(x)
    ddisp = np.zeros_like(disp)
    for bb in range(B):
        for i in range(H):
            for j in range(W):
                sx = j - disp[bb, 0, i, j]
                x0 = int(np.floor(sx))
                a = sx - x0
                x0c = min(max(x0, 0), W - 1)
                x1c = min(max(x0 + 1, 0), W - 1)
                acc = 0.0
                for c in range(C):
                    g = dy[bb, c, i, j]
                    dx[bb, c, i, x0c] += g * (1 - a)
                    dx[bb, c, i, x1c] += g * a
                    acc += g * (x[bb, c, i, x1c] - x[bb, c, i, x0c])
                ddisp[bb, 0, i, j] = -acc
    return dx, ddisp


@njit(cache=True)
def distance_volume_fwd(fl, fr, offsets):
    B, C, H, W = fl.shape
    D = offsets.shape[0]
    costs = np.empty((B, D, H, W), dtype=fl.dtype)
    for bb in range(B):
        for di in range(D):
            off = offsets[di]
            for i in range(H):
                for j in range(W):
                    js = j - off
                    acc = 0.0
                    if 0 <= js < W:
                        for c in range(C):
                            acc += abs(fl[bb, c, i, j] - fr[bb, c, i, js])
                    else:
                        for c in range(C):
                            acc += abs(fl[bb, c, i, j])
                    costs[bb, di, i, j] = acc / C
    return costs


@njit(cache=True)
def distance_volume_bwd(dcost, fl, fr, offsets):
    B, C, H, W = fl.shape
    D = offsets.shape[0]
    dfl = np.zeros_like(fl)
    dfr = np.zeros_like(fr)
    for bb in range(B):
        for di in range(D):
            off = offsets[di]
            for i in range(H):
                for j in range(W):
                    g = dcost[bb, di, i, j] / C
                    js = j - off
                    if 0 <= js < W:
                        for c in range(C):
                            s = np.sign(fl[bb, c, i, j] - fr[bb, c, i, js])
                            dfl[bb, c, i, j] += s * g
                            dfr[bb, c, i, js] -= s * g
                    else:
                        for c in range(C):
                            dfl[bb, c, i, j] += np.sign(fl[bb, c, i, j]) * g
    return dfl, dfr

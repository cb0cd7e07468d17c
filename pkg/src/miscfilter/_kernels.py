"""Fused compiled loops for per-pixel sampling.

Arrays are 4D ``(channels, batch, H, W)``.  The bilinear convention matches
:func:`miscfilter.tensor.bilinear_sample`: coordinates are clamped to the
image, the left/top corner is ``min(floor(c), size - 2)`` and gradients
w.r.t. a coordinate vanish outside ``[0, size - 1]``.  Loops run serially in
a fixed order, so results are bit-reproducible.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _corner(c, size):
    cc = min(max(c, 0.0), size - 1.0)
    c0 = int(math.floor(cc))
    if c0 > size - 2:
        c0 = max(size - 2, 0)
    c1 = min(c0 + 1, size - 1)
    return c0, c1, cc - c0, 1.0 if (c >= 0.0 and c <= size - 1.0) else 0.0


@njit(cache=True, error_model="numpy")
def sample_forward(img, xs, ys):
    C, B, H, W = img.shape
    out = np.zeros(img.shape[:1] + xs.shape, dtype=img.dtype)
    for b in range(B):
        for y in range(xs.shape[1]):
            for x in range(xs.shape[2]):
                x0, x1, fx, _ = _corner(xs[b, y, x], W)
                y0, y1, fy, _ = _corner(ys[b, y, x], H)
                w00 = (1 - fx) * (1 - fy)
                w01 = fx * (1 - fy)
                w10 = (1 - fx) * fy
                w11 = fx * fy
                for c in range(C):
                    out[c, b, y, x] = (w00 * img[c, b, y0, x0] + w01 * img[c, b, y0, x1]
                                       + w10 * img[c, b, y1, x0] + w11 * img[c, b, y1, x1])
    return out


@njit(cache=True, error_model="numpy")
def sample_backward(g, img, xs, ys, need_img):
    C, B, H, W = img.shape
    gimg = np.zeros(img.shape if need_img else (0, 0, 0, 0), dtype=img.dtype)
    gx = np.zeros(xs.shape, dtype=xs.dtype)
    gy = np.zeros(ys.shape, dtype=ys.dtype)
    for b in range(B):
        for y in range(xs.shape[1]):
            for x in range(xs.shape[2]):
                x0, x1, fx, mx = _corner(xs[b, y, x], W)
                y0, y1, fy, my = _corner(ys[b, y, x], H)
                dx = 0.0
                dy = 0.0
                for c in range(C):
                    gc = g[c, b, y, x]
                    v00 = img[c, b, y0, x0]
                    v01 = img[c, b, y0, x1]
                    v10 = img[c, b, y1, x0]
                    v11 = img[c, b, y1, x1]
                    dx += gc * ((v01 - v00) * (1 - fy) + (v11 - v10) * fy)
                    dy += gc * ((v10 - v00) * (1 - fx) + (v11 - v01) * fx)
                    if need_img:
                        gimg[c, b, y0, x0] += gc * (1 - fx) * (1 - fy)
                        gimg[c, b, y0, x1] += gc * fx * (1 - fy)
                        gimg[c, b, y1, x0] += gc * (1 - fx) * fy
                        gimg[c, b, y1, x1] += gc * fx * fy
                gx[b, y, x] = dx * mx
                gy[b, y, x] = dy * my
    return gimg, gx, gy


@njit(cache=True, error_model="numpy")
def scf_forward(img, kv, kh, px, py, w):
    C, B, H, W = img.shape
    n = kv.shape[0]
    r = (n - 1) // 2
    out = np.zeros(img.shape, dtype=img.dtype)
    # tap-major order keeps the parameter planes streaming through cache
    for b in range(B):
        for i in range(n):
            for j in range(n):
                t = i * n + j
                for y in range(H):
                    for x in range(W):
                        coef = w[t, b, y, x] * kv[i, b, y, x] * kh[j, b, y, x]
                        x0, x1, fx, _ = _corner(x + (j - r) + px[t, b, y, x], W)
                        y0, y1, fy, _ = _corner(y + (i - r) + py[t, b, y, x], H)
                        w00 = coef * (1 - fx) * (1 - fy)
                        w01 = coef * fx * (1 - fy)
                        w10 = coef * (1 - fx) * fy
                        w11 = coef * fx * fy
                        for c in range(C):
                            out[c, b, y, x] += (w00 * img[c, b, y0, x0] + w01 * img[c, b, y0, x1]
                                                + w10 * img[c, b, y1, x0] + w11 * img[c, b, y1, x1])
    return out


@njit(cache=True, error_model="numpy")
def scf_backward(g, img, kv, kh, px, py, w, need_img):
    C, B, H, W = img.shape
    n = kv.shape[0]
    r = (n - 1) // 2
    gimg = np.zeros(img.shape if need_img else (0, 0, 0, 0), dtype=img.dtype)
    gkv = np.zeros(kv.shape, dtype=kv.dtype)
    gkh = np.zeros(kh.shape, dtype=kh.dtype)
    gpx = np.zeros(px.shape, dtype=px.dtype)
    gpy = np.zeros(py.shape, dtype=py.dtype)
    gw = np.zeros(w.shape, dtype=w.dtype)
    for b in range(B):
        for i in range(n):
            for j in range(n):
                t = i * n + j
                for y in range(H):
                    for x in range(W):
                        wt = w[t, b, y, x]
                        kvi = kv[i, b, y, x]
                        khj = kh[j, b, y, x]
                        coef = wt * kvi * khj
                        x0, x1, fx, mx = _corner(x + (j - r) + px[t, b, y, x], W)
                        y0, y1, fy, my = _corner(y + (i - r) + py[t, b, y, x], H)
                        w00 = (1 - fx) * (1 - fy)
                        w01 = fx * (1 - fy)
                        w10 = (1 - fx) * fy
                        w11 = fx * fy
                        gcoef = 0.0
                        dx = 0.0
                        dy = 0.0
                        for c in range(C):
                            gc = g[c, b, y, x]
                            v00 = img[c, b, y0, x0]
                            v01 = img[c, b, y0, x1]
                            v10 = img[c, b, y1, x0]
                            v11 = img[c, b, y1, x1]
                            gcoef += gc * (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11)
                            dx += gc * ((v01 - v00) * (1 - fy) + (v11 - v10) * fy)
                            dy += gc * ((v10 - v00) * (1 - fx) + (v11 - v01) * fx)
                            if need_img:
                                gs = coef * gc
                                gimg[c, b, y0, x0] += gs * w00
                                gimg[c, b, y0, x1] += gs * w01
                                gimg[c, b, y1, x0] += gs * w10
                                gimg[c, b, y1, x1] += gs * w11
                        gw[t, b, y, x] = gcoef * kvi * khj
                        gkv[i, b, y, x] += gcoef * wt * khj
                        gkh[j, b, y, x] += gcoef * wt * kvi
                        gpx[t, b, y, x] = coef * dx * mx
                        gpy[t, b, y, x] = coef * dy * my
    return gimg, gkv, gkh, gpx, gpy, gw

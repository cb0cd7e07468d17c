"""Separable collaborative filtering.

Every output pixel is a weighted sum over ``n*n`` taps.  Tap ``t = (i, j)``
(row-major, ``i`` vertical) contributes::

    w[t] * k_v[i] * k_h[j] * sample(I', a + j - r + p_x[t], b + i - r + p_y[t])

with ``r = (n - 1) // 2``.  The learned offsets ``p_x, p_y`` are residuals
on top of a regular ``n x n`` window, so zero offsets give an ordinary
per-pixel ``n x n`` filter.  Taps are shared across colour channels.
"""

import math
from dataclasses import dataclass, fields

import numpy as np

from . import _kernels
from .exceptions import ConfigurationError, NumericError
from .tensor import (
    DiffOp,
    channel_softmax,
    channel_softmax_backward,
    concat,
    conv2d,
    conv2d_backward,
)


@dataclass
class ScfParams:
    """Per-pixel filter parameters.

    Attributes
    ----------
    k_v, k_h : ndarray, shape (n, *batch, H, W)
        Vertical and horizontal 1D kernels.
    p_x, p_y : ndarray, shape (n*n, *batch, H, W)
        Residual tap offsets in pixels.
    w : ndarray, shape (n*n, *batch, H, W)
        Tap weights, normalised to sum to one over taps.
    """

    k_v: np.ndarray
    k_h: np.ndarray
    p_x: np.ndarray
    p_y: np.ndarray
    w: np.ndarray

    @property
    def n(self):
        return self.k_v.shape[0]

    def validate(self, spatial=None):
        n = self.n
        if n % 2 == 0:
            raise ConfigurationError(f"kernel size must be odd, got {n}")
        rest = self.k_v.shape[1:] if spatial is None else tuple(spatial)
        expected = {"k_v": n, "k_h": n, "p_x": n * n, "p_y": n * n, "w": n * n}
        for f in fields(self):
            arr = getattr(self, f.name)
            if arr.shape != (expected[f.name],) + rest:
                raise ConfigurationError(
                    f"{f.name} has shape {arr.shape}, expected {(expected[f.name],) + rest}")
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"non-finite values in {f.name}")
        return self

    def astype(self, dtype):
        return ScfParams(*(getattr(self, f.name).astype(dtype) for f in fields(self)))

    def as_tuple(self):
        return tuple(getattr(self, f.name) for f in fields(self))


def tap_grid(n):
    """Base offsets ``(g_x, g_y)`` of the ``n*n`` taps in row-major order."""
    if n < 1 or n % 2 == 0:
        raise ConfigurationError(f"kernel size must be a positive odd integer, got {n}")
    r = (n - 1) // 2
    i, j = np.divmod(np.arange(n * n), n)
    return j - r, i - r


def outer_kernel(k_v, k_h):
    """Rank-1 ``n x n`` kernel with entry ``(i, j) = k_v[i] * k_h[j]``."""
    return np.outer(k_v, k_h)


# ---------------------------------------------------------------------------
# parameter estimation


def estimate_params(F, F_aligned, kernel_head, offset_head, weight_head, n,
                    use_kernel=True, use_offset=True, use_weight=True):
    """Predict :class:`ScfParams` from ``concat(F, F_aligned)``.

    Each head is a ``(weight, bias)`` single conv layer: the kernel head has
    ``2n`` outputs (``k_v`` then ``k_h``), the offset head ``2n^2`` (``p_x``
    then ``p_y``) and the weight head ``n^2`` followed by a channel softmax.
    A disabled component is replaced by its neutral value: unit kernels,
    zero offsets or uniform ``1/n^2`` weights.
    """
    x = concat(F, F_aligned)
    spatial = x.shape[1:]
    dtype = x.dtype
    nn = n * n
    expected = {"kernel": (kernel_head, 2 * n), "offset": (offset_head, 2 * nn), "weight": (weight_head, nn)}
    for name, (head, ch) in expected.items():
        if head is not None and head[0].shape[0] != ch:
            raise ConfigurationError(
                f"{name} estimator has {head[0].shape[0]} outputs, expected {ch} for n={n}")
    if use_kernel:
        k = conv2d(x, *kernel_head)
        k_v, k_h = k[:n], k[n:]
    else:
        k_v = k_h = np.ones((n,) + spatial, dtype=dtype)
    if use_offset:
        p = conv2d(x, *offset_head)
        p_x, p_y = p[:nn], p[nn:]
    else:
        p_x = p_y = np.zeros((nn,) + spatial, dtype=dtype)
    if use_weight:
        w = channel_softmax(conv2d(x, *weight_head))
    else:
        w = np.full((nn,) + spatial, 1.0 / nn, dtype=dtype)
    return ScfParams(k_v, k_h, p_x, p_y, w)


def estimate_params_backward(grads, F, F_aligned, params, kernel_head, offset_head, weight_head,
                             use_kernel=True, use_offset=True, use_weight=True):
    """Backpropagate parameter gradients to the two features and the heads.

    Returns ``(g_F, g_F_aligned, head_grads)`` where ``head_grads`` maps
    ``"kernel"``/``"offset"``/``"weight"`` to ``(g_weight, g_bias)`` for each
    enabled head.
    """
    x = concat(F, F_aligned)
    gx = np.zeros_like(x)
    head_grads = {}
    if use_kernel:
        g = np.concatenate([grads.k_v, grads.k_h])
        gxi, gw, gb = conv2d_backward(g, x, kernel_head[0])
        gx += gxi
        head_grads["kernel"] = (gw, gb)
    if use_offset:
        g = np.concatenate([grads.p_x, grads.p_y])
        gxi, gw, gb = conv2d_backward(g, x, offset_head[0])
        gx += gxi
        head_grads["offset"] = (gw, gb)
    if use_weight:
        g = channel_softmax_backward(grads.w, params.w)
        gxi, gw, gb = conv2d_backward(g, x, weight_head[0])
        gx += gxi
        head_grads["weight"] = (gw, gb)
    c = F.shape[0]
    return gx[:c], gx[c:], head_grads


# ---------------------------------------------------------------------------
# filtering


def _flat4(a, spatial):
    """View ``(K, *batch, H, W)`` as a contiguous ``(K, B, H, W)`` array."""
    return np.ascontiguousarray(a.reshape(a.shape[0], -1, *spatial))


def _flat_params(params, dtype, spatial):
    return tuple(_flat4(np.asarray(a, dtype=dtype), spatial) for a in params.as_tuple())


def scf_filter(image, params):
    """Filter ``image`` (``C x *batch x H x W``) with per-pixel separable taps."""
    if not all(np.all(np.isfinite(a)) for a in params.as_tuple()):
        raise NumericError("non-finite values in filter parameters")
    params.validate(image.shape[1:])
    dtype = np.result_type(image, params.w)
    spatial = image.shape[-2:]
    out = _kernels.scf_forward(_flat4(image.astype(dtype, copy=False), spatial),
                               *_flat_params(params, dtype, spatial))
    return out.reshape(image.shape)


def scf_filter_backward(g, image, params, need_image_grad=True):
    """Returns ``(g_image, ScfParams of gradients)``."""
    dtype = np.result_type(image, params.w)
    spatial = image.shape[-2:]
    grads = _kernels.scf_backward(_flat4(np.asarray(g, dtype=dtype), spatial),
                                  _flat4(image.astype(dtype, copy=False), spatial),
                                  *_flat_params(params, dtype, spatial), need_image_grad)
    g_img = grads[0].reshape(image.shape) if need_image_grad else None
    shaped = [gp.reshape(p.shape) for gp, p in zip(grads[1:], params.as_tuple())]
    return g_img, ScfParams(*shaped)


def scf_filter_bruteforce(image, params):
    """Reference filter: explicit 2D kernels and scalar sampling, float64.

    Deliberately shares no code with :func:`scf_filter`: the rank-1 kernel is
    materialised per pixel and every sample is computed with scalar
    arithmetic.  Only single images (``C x H x W``) are supported.
    """
    image = np.asarray(image, dtype=np.float64)
    kv, kh, px, py, w = (np.asarray(a, dtype=np.float64) for a in params.as_tuple())
    C, H, W = image.shape
    n = kv.shape[0]
    r = (n - 1) // 2

    def sample(c, x, y):
        x = min(max(x, 0.0), W - 1.0)
        y = min(max(y, 0.0), H - 1.0)
        x0 = min(int(math.floor(x)), max(W - 2, 0))
        y0 = min(int(math.floor(y)), max(H - 2, 0))
        x1 = min(x0 + 1, W - 1)
        y1 = min(y0 + 1, H - 1)
        fx = x - x0
        fy = y - y0
        return ((1 - fx) * (1 - fy) * image[c, y0, x0] + fx * (1 - fy) * image[c, y0, x1]
                + (1 - fx) * fy * image[c, y1, x0] + fx * fy * image[c, y1, x1])

    out = np.zeros((C, H, W))
    for b in range(H):
        for a in range(W):
            kernel = outer_kernel(kv[:, b, a], kh[:, b, a])
            for i in range(n):
                for j in range(n):
                    t = i * n + j
                    x = a + (j - r) + px[t, b, a]
                    y = b + (i - r) + py[t, b, a]
                    coef = w[t, b, a] * kernel[i, j]
                    for c in range(C):
                        out[c, b, a] += coef * sample(c, x, y)
    return out


def _filter_forward(image, k_v, k_h, p_x, p_y, w):
    return scf_filter(image, ScfParams(k_v, k_h, p_x, p_y, w))


def _filter_backward(inp, g):
    g_img, gp = scf_filter_backward(g, inp[0], ScfParams(*inp[1:]))
    return (g_img,) + gp.as_tuple()


SCF_FILTER = DiffOp("scf_filter", _filter_forward, _filter_backward)

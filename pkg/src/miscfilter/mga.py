"""Motion-guided alignment.

A one-layer flow estimator predicts a per-pixel displacement field ``o``
(``2 x H x W``, channel 0 = x, channel 1 = y, in pixels) and a one-layer mask
estimator predicts a blend mask ``m`` (``1 x H x W``, strictly inside (0, 1)).
Image and feature are then warped both ways along the flow and blended::

    aligned = m * warp(o, X) + (1 - m) * warp(-o, X)

The same ``(o, m)`` pair aligns the image and the feature.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .exceptions import ConfigurationError
from .tensor import (
    DiffOp,
    conv2d,
    conv2d_backward,
    sigmoid,
    sigmoid_backward,
    tanh_clamp,
    tanh_clamp_backward,
)

DEFAULT_MAX_FLOW = 16.0


def estimate_flow(F, weight, bias, max_flow=DEFAULT_MAX_FLOW):
    """Flow field ``max_flow * tanh(conv(F) / max_flow)``, shape ``(2, *batch, H, W)``."""
    if weight.shape[0] != 2:
        raise ConfigurationError(f"flow estimator must have 2 output channels, got {weight.shape[0]}")
    return tanh_clamp(conv2d(F, weight, bias), max_flow)


def estimate_flow_backward(g, F, weight, o, max_flow=DEFAULT_MAX_FLOW):
    graw = tanh_clamp_backward(g, o, max_flow)
    return conv2d_backward(graw, F, weight)


def estimate_mask(F, weight, bias):
    """Blend mask ``sigmoid(conv(F))``, shape ``(1, *batch, H, W)``."""
    if weight.shape[0] != 1:
        raise ConfigurationError(f"mask estimator must have 1 output channel, got {weight.shape[0]}")
    return sigmoid(conv2d(F, weight, bias))


def estimate_mask_backward(g, F, weight, m):
    return conv2d_backward(sigmoid_backward(g, m), F, weight)


def _grid(o):
    """Flattened ``(B, H, W)`` sampling coordinates for flow ``o``."""
    H, W = o.shape[-2:]
    xs = np.arange(W, dtype=o.dtype) + o[0].reshape(-1, H, W)
    ys = np.arange(H, dtype=o.dtype)[:, None] + o[1].reshape(-1, H, W)
    return xs, ys


def _flat(X):
    return np.ascontiguousarray(X.reshape(X.shape[0], -1, *X.shape[-2:]))


def warp(o, X):
    """Backward warp: ``out[c, y, x] = X[c]`` sampled at ``(x + o_x, y + o_y)``."""
    if o.shape[0] != 2 or o.shape[1:] != X.shape[1:]:
        raise ConfigurationError(f"flow {o.shape} does not match tensor {X.shape}")
    dtype = np.result_type(o, X)
    xs, ys = _grid(o.astype(dtype, copy=False))
    return _kernels.sample_forward(_flat(X.astype(dtype, copy=False)), xs, ys).reshape(X.shape)


def warp_backward(g, o, X, need_input_grad=True):
    """Returns ``(g_o, g_X)``."""
    dtype = np.result_type(o, X)
    xs, ys = _grid(o.astype(dtype, copy=False))
    gX, gx, gy = _kernels.sample_backward(_flat(np.asarray(g, dtype=dtype)),
                                          _flat(X.astype(dtype, copy=False)), xs, ys,
                                          need_input_grad)
    gX = gX.reshape(X.shape) if need_input_grad else None
    return np.stack([gx.reshape(o.shape[1:]), gy.reshape(o.shape[1:])]), gX


def bidirectional_warp(o, m, X):
    """Mask-weighted blend of the forward and reverse warps of ``X``.

    Evaluated as ``rev + m * (fwd - rev)`` so that equal warps (zero flow)
    reproduce ``X`` bit-exactly for any mask.
    """
    rev = warp(-o, X)
    return rev + m * (warp(o, X) - rev)


def bidirectional_warp_backward(g, o, m, X, need_input_grad=True):
    """Returns ``(g_o, g_m, g_X)``."""
    fwd = warp(o, X)
    rev = warp(-o, X)
    gm = (g * (fwd - rev)).sum(axis=0, keepdims=True)
    go_f, gX_f = warp_backward(m * g, o, X, need_input_grad)
    go_r, gX_r = warp_backward((1 - m) * g, -o, X, need_input_grad)
    gX = gX_f + gX_r if need_input_grad else None
    return go_f - go_r, gm, gX


@dataclass
class Alignment:
    """Output of :func:`mga_align`: flow, mask, aligned image and feature."""

    flow: np.ndarray
    mask: np.ndarray
    image: np.ndarray
    feature: np.ndarray


def mga_align(image, F, flow_params, mask_params, max_flow=DEFAULT_MAX_FLOW):
    """Align ``image`` and feature ``F`` to the motion midpoint.

    Parameters
    ----------
    image : ndarray, shape (3, *batch, H, W)
    F : ndarray, shape (C, *batch, H, W)
    flow_params, mask_params : (weight, bias) tuples of single conv layers
    max_flow : float
        Bound on the flow magnitude per component.
    """
    if image.shape[1:] != F.shape[1:]:
        raise ConfigurationError(f"image {image.shape} and feature {F.shape} disagree spatially")
    o = estimate_flow(F, *flow_params, max_flow=max_flow)
    m = estimate_mask(F, *mask_params)
    return Alignment(o, m, bidirectional_warp(o, m, image), bidirectional_warp(o, m, F))


def mga_align_backward(g_image, g_feature, image, F, flow_params, mask_params, align,
                       max_flow=DEFAULT_MAX_FLOW, need_image_grad=True):
    """Backpropagate through :func:`mga_align`.

    Returns ``(g_image, g_F, (g_wf, g_bf), (g_wm, g_bm))``; ``g_F`` includes
    the path through both estimators.
    """
    o, m = align.flow, align.mask
    go_i, gm_i, gI = bidirectional_warp_backward(g_image, o, m, image, need_image_grad)
    go_f, gm_f, gF = bidirectional_warp_backward(g_feature, o, m, F)
    gFf, gwf, gbf = estimate_flow_backward(go_i + go_f, F, flow_params[0], o, max_flow)
    gFm, gwm, gbm = estimate_mask_backward(gm_i + gm_f, F, mask_params[0], m)
    return gI, gF + gFf + gFm, (gwf, gbf), (gwm, gbm)


def _flow_op(max_flow):
    return DiffOp(
        "estimate_flow",
        lambda F, w, b: estimate_flow(F, w, b, max_flow),
        lambda inp, g: estimate_flow_backward(g, inp[0], inp[1], estimate_flow(*inp, max_flow), max_flow),
    )


def _align_forward(image, F, wf, bf, wm, bm, max_flow):
    a = mga_align(image, F, (wf, bf), (wm, bm), max_flow)
    return np.concatenate([a.image, a.feature])


def _align_backward(inp, g, max_flow):
    image, F, wf, bf, wm, bm = inp
    a = mga_align(image, F, (wf, bf), (wm, bm), max_flow)
    c = image.shape[0]
    gI, gF, (gwf, gbf), (gwm, gbm) = mga_align_backward(
        g[:c], g[c:], image, F, (wf, bf), (wm, bm), a, max_flow)
    return gI, gF, gwf, gbf, gwm, gbm


ESTIMATE_FLOW = _flow_op(DEFAULT_MAX_FLOW)
ESTIMATE_MASK = DiffOp(
    "estimate_mask",
    estimate_mask,
    lambda inp, g: estimate_mask_backward(g, inp[0], inp[1], estimate_mask(*inp)),
)
WARP = DiffOp("warp", warp, lambda inp, g: warp_backward(g, *inp))
MGA_ALIGN = DiffOp(
    "mga_align",
    lambda *a: _align_forward(*a, DEFAULT_MAX_FLOW),
    lambda inp, g: _align_backward(inp, g, DEFAULT_MAX_FLOW),
)

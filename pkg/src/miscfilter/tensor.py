"""Differentiable tensor primitives.

Tensors are plain :class:`numpy.ndarray` objects laid out channel-first:
``(C, H, W)`` for a single image or ``(C, *batch, H, W)`` for a batch, so
channel concatenation and per-pixel softmax always act on axis 0 and the two
trailing axes are always spatial.  ``float32`` is the compute precision and
``float64`` the verification precision; every op preserves the input dtype.

Each op comes with a hand-written vector-Jacobian product named
``<op>_backward``.  The :class:`DiffOp` wrapper packages a forward/backward
pair behind the ``(inputs, upstream) -> grads`` contract used by
:func:`gradcheck`.
"""

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .exceptions import ConfigurationError, NumericError

COMPUTE_DTYPE = np.float32
VERIFY_DTYPE = np.float64


def check_finite(x, name="tensor"):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {name}")
    return x


# ---------------------------------------------------------------------------
# replicate padding


def pad_replicate(x, p):
    if p == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    return np.pad(x, width, mode="edge")


def pad_replicate_backward(gpad, p):
    """Fold the gradient of an edge-padded array back onto the original."""
    if p == 0:
        return gpad
    H = gpad.shape[-2] - 2 * p
    W = gpad.shape[-1] - 2 * p
    rows = gpad[..., p:p + H, :].copy()
    rows[..., 0, :] += gpad[..., :p, :].sum(axis=-2)
    rows[..., -1, :] += gpad[..., p + H:, :].sum(axis=-2)
    out = rows[..., p:p + W].copy()
    out[..., 0] += rows[..., :p].sum(axis=-1)
    out[..., -1] += rows[..., p + W:].sum(axis=-1)
    return out


# ---------------------------------------------------------------------------
# conv2d


def _check_conv(x, weight, bias):
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ConfigurationError(f"weight must be O x C x k x k, got {weight.shape}")
    k = weight.shape[2]
    if k % 2 == 0:
        raise ConfigurationError(f"kernel size must be odd, got {k}")
    if x.ndim < 3 or x.shape[0] != weight.shape[1]:
        raise ConfigurationError(
            f"input channels {x.shape[0] if x.ndim else None} do not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ConfigurationError(f"bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    return k


def conv2d(x, weight, bias=None):
    """Same-size cross-correlation with replicate border.

    Parameters
    ----------
    x : ndarray, shape (C, *batch, H, W)
    weight : ndarray, shape (O, C, k, k), k odd
    bias : ndarray, shape (O,), optional

    Returns
    -------
    ndarray, shape (O, *batch, H, W)
    """
    k = _check_conv(x, weight, bias)
    C = x.shape[0]
    O = weight.shape[0]
    H, W = x.shape[-2:]
    if k == 1:
        out = (np.ascontiguousarray(weight[:, :, 0, 0]) @ x.reshape(C, -1)).reshape((O,) + x.shape[1:])
    else:
        p = k // 2
        xp = pad_replicate(x, p)
        Wp = W + 2 * p
        flat = xp.reshape(C, -1)
        L = flat.shape[1]
        n_valid = L - (k - 1) * (Wp + 1)
        taps = np.ascontiguousarray(weight.transpose(2, 3, 0, 1))
        acc = np.zeros((O, L), dtype=np.result_type(x, weight))
        for i in range(k):
            for j in range(k):
                off = i * Wp + j
                acc[:, :n_valid] += taps[i, j] @ flat[:, off:off + n_valid]
        out = acc.reshape((O,) + xp.shape[1:])[..., :H, :W]
    if bias is not None:
        out = out + bias.reshape((O,) + (1,) * (x.ndim - 1))
    return np.ascontiguousarray(out)


def conv2d_backward(g, x, weight, need_input_grad=True):
    """Gradients of :func:`conv2d` w.r.t. ``x``, ``weight`` and ``bias``."""
    k = weight.shape[2]
    C = x.shape[0]
    O = weight.shape[0]
    H, W = x.shape[-2:]
    gb = g.reshape(O, -1).sum(axis=1)
    if k == 1:
        g2 = g.reshape(O, -1)
        x2 = x.reshape(C, -1)
        gw = (g2 @ x2.T).reshape(O, C, 1, 1)
        gx = None
        if need_input_grad:
            gx = (np.ascontiguousarray(weight[:, :, 0, 0].T) @ g2).reshape((C,) + g.shape[1:])
        return gx, gw, gb
    p = k // 2
    xp = pad_replicate(x, p)
    Hp, Wp = H + 2 * p, W + 2 * p
    flat = xp.reshape(C, -1)
    L = flat.shape[1]
    n_valid = L - (k - 1) * (Wp + 1)
    gpad = np.zeros((O,) + xp.shape[1:], dtype=g.dtype)
    gpad[..., :H, :W] = g
    gflat = gpad.reshape(O, -1)[:, :n_valid]
    taps_t = np.ascontiguousarray(weight.transpose(2, 3, 1, 0))
    gw = np.empty((k, k, O, C), dtype=np.result_type(g, x))
    gxflat = np.zeros((C, L), dtype=np.result_type(g, weight)) if need_input_grad else None
    for i in range(k):
        for j in range(k):
            off = i * Wp + j
            gw[i, j] = gflat @ flat[:, off:off + n_valid].T
            if need_input_grad:
                gxflat[:, off:off + n_valid] += taps_t[i, j] @ gflat
    gw = np.ascontiguousarray(gw.transpose(2, 3, 0, 1))
    gx = None
    if need_input_grad:
        gx = pad_replicate_backward(gxflat.reshape((C,) + xp.shape[1:]), p)
    return gx, gw, gb


# ---------------------------------------------------------------------------
# elementwise activations


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_backward(g, out):
    return g * out * (1.0 - out)


def leaky_relu(x, slope=0.1):
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(g, x, slope=0.1):
    return np.where(x > 0, g, slope * g)


def tanh_clamp(x, limit):
    """Smoothly clamp ``x`` to ``(-limit, limit)``."""
    return limit * np.tanh(x / limit)


def tanh_clamp_backward(g, out, limit):
    return g * (1.0 - (out / limit) ** 2)


# ---------------------------------------------------------------------------
# channel softmax


def channel_softmax(x):
    """Softmax across axis 0 independently at every spatial location."""
    z = x - x.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def channel_softmax_backward(g, out):
    return out * (g - (g * out).sum(axis=0, keepdims=True))


# ---------------------------------------------------------------------------
# concat


def concat(a, b):
    """Stack ``a`` and ``b`` along the channel axis, ``a`` first."""
    if a.shape[1:] != b.shape[1:]:
        raise ConfigurationError(f"cannot concat {a.shape} with {b.shape}: spatial/batch mismatch")
    return np.concatenate([a, b], axis=0)


def concat_backward(g, c1):
    return g[:c1], g[c1:]


# ---------------------------------------------------------------------------
# resampling between scales


def avg_pool2(x):
    """2x2 average pooling over the trailing spatial axes."""
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        raise ConfigurationError(f"spatial size {H}x{W} not divisible by 2")
    v = x.reshape(x.shape[:-2] + (H // 2, 2, W // 2, 2))
    return v.mean(axis=(-3, -1))


def avg_pool2_backward(g):
    return 0.25 * np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1)


def upsample2(x):
    """Nearest-neighbour 2x upsampling."""
    return np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1)


def upsample2_backward(g):
    H, W = g.shape[-2:]
    return g.reshape(g.shape[:-2] + (H // 2, 2, W // 2, 2)).sum(axis=(-3, -1))


# ---------------------------------------------------------------------------
# bilinear sampling


def _bilinear_taps(shape, x, y):
    """Corner indices and fractional weights for sampling with clamping.

    ``shape`` is the image shape ``(C, *batch, H, W)``; ``x`` and ``y`` have
    shape ``(*batch, *query)``.  Returns flat corner indices into the
    ``(C, -1)`` view together with the fractional parts and in-range masks.
    """
    batch = shape[1:-2]
    H, W = shape[-2:]
    x = np.asarray(x)
    y = np.asarray(y)
    xc = np.clip(x, 0, W - 1)
    yc = np.clip(y, 0, H - 1)
    x0 = np.minimum(np.floor(xc), max(W - 2, 0)).astype(np.intp)
    y0 = np.minimum(np.floor(yc), max(H - 2, 0)).astype(np.intp)
    fx = (xc - x0).astype(x.dtype if x.dtype.kind == "f" else np.float64)
    fy = (yc - y0).astype(y.dtype if y.dtype.kind == "f" else np.float64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    nb = int(np.prod(batch)) if batch else 1
    qdims = x.ndim - len(batch)
    base = (np.arange(nb, dtype=np.intp) * (H * W)).reshape(batch + (1,) * qdims) if batch else 0
    r0 = base + y0 * W
    r1 = base + y1 * W
    idx = (r0 + x0, r0 + x1, r1 + x0, r1 + x1)
    inx = (x >= 0) & (x <= W - 1)
    iny = (y >= 0) & (y <= H - 1)
    return idx, fx, fy, inx, iny


def bilinear_sample(img, x, y):
    """Sample ``img`` at real-valued pixel coordinates with replicate border.

    Parameters
    ----------
    img : ndarray, shape (C, *batch, H, W)
    x, y : float or ndarray, shape (*batch, *query)
        Column and row coordinates in pixels.

    Returns
    -------
    ndarray, shape (C, *batch, *query)
    """
    (i00, i01, i10, i11), fx, fy, _, _ = _bilinear_taps(img.shape, x, y)
    flat = img.reshape(img.shape[0], -1)
    top = flat[:, i00] * (1 - fx) + flat[:, i01] * fx
    bot = flat[:, i10] * (1 - fx) + flat[:, i11] * fx
    return top * (1 - fy) + bot * fy


def bilinear_sample_backward(g, img, x, y, need_img_grad=True):
    """Returns ``(g_img, g_x, g_y)`` for :func:`bilinear_sample`."""
    (i00, i01, i10, i11), fx, fy, inx, iny = _bilinear_taps(img.shape, x, y)
    C = img.shape[0]
    flat = img.reshape(C, -1)
    v00, v01, v10, v11 = flat[:, i00], flat[:, i01], flat[:, i10], flat[:, i11]
    dx = (v01 - v00) * (1 - fy) + (v11 - v10) * fy
    dy = (v10 - v00) * (1 - fx) + (v11 - v01) * fx
    gx = (g * dx).sum(axis=0) * inx
    gy = (g * dy).sum(axis=0) * iny
    gimg = None
    if need_img_grad:
        M = flat.shape[1]
        chan = (np.arange(C, dtype=np.intp) * M).reshape((C,) + (1,) * (g.ndim - 1))
        w = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
        idx = np.concatenate([np.broadcast_to(chan + i, g.shape).ravel() for i in (i00, i01, i10, i11)])
        val = np.concatenate([(g * wi).ravel() for wi in w])
        gimg = np.bincount(idx, weights=val, minlength=C * M).astype(img.dtype, copy=False)
        gimg = gimg.reshape(img.shape)
    return gimg, gx, gy


# ---------------------------------------------------------------------------
# DiffOp contract and gradient checking


@dataclass(frozen=True)
class DiffOp:
    """A forward function paired with its vector-Jacobian product.

    ``backward(inputs, upstream)`` returns one gradient per input, each with
    the same shape as that input.
    """

    name: str
    forward: Callable
    backward: Callable


@dataclass
class GradcheckReport:
    op: str
    errors: list = field(default_factory=list)
    tolerance: float = 1e-3

    @property
    def max_error(self):
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self):
        return self.max_error <= self.tolerance

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        errs = ", ".join(f"{e:.2e}" for e in self.errors)
        return f"{status} {self.op}: rel.err [{errs}] tol={self.tolerance:g}"


def relative_error(analytic, numeric):
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def numerical_gradient(f, x, eps=1e-6):
    """Central-difference gradient of scalar ``f()`` w.r.t. array ``x`` (in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def gradcheck(op: DiffOp, inputs: Sequence, tolerance=1e-3, eps=1e-6, seed=0, wrt=None):
    """Compare ``op.backward`` against central differences in float64.

    The scalar probed is ``sum(r * op.forward(*inputs))`` with a fixed random
    projection ``r``.  ``wrt`` restricts the check to a subset of input
    positions (the others are still passed through).
    """
    inputs = [np.array(v, dtype=VERIFY_DTYPE) for v in inputs]
    out = op.forward(*inputs)
    check_finite(out, f"{op.name} output")
    rng = np.random.default_rng(seed)
    r = rng.standard_normal(np.shape(out))
    grads = op.backward(inputs, r)
    report = GradcheckReport(op.name, tolerance=tolerance)
    positions = range(len(inputs)) if wrt is None else wrt
    for i in positions:
        if grads[i] is None:
            continue
        check_finite(grads[i], f"{op.name} grad[{i}]")
        if np.shape(grads[i]) != inputs[i].shape:
            raise ConfigurationError(
                f"{op.name}: grad[{i}] shape {np.shape(grads[i])} != input shape {inputs[i].shape}")

        def f():
            return float(np.sum(r * op.forward(*inputs)))

        num = numerical_gradient(f, inputs[i], eps)
        check_finite(num, f"{op.name} numeric grad[{i}]")
        report.errors.append(relative_error(grads[i], num))
    return report


def _conv_bwd(inputs, g):
    x, w, b = inputs
    gx, gw, gb = conv2d_backward(g, x, w)
    return gx, gw, gb


def _bilinear_bwd(inputs, g):
    img, x, y = inputs
    return bilinear_sample_backward(g, img, x, y)


CONV2D = DiffOp("conv2d", conv2d, _conv_bwd)
SIGMOID = DiffOp("sigmoid", sigmoid, lambda inp, g: (sigmoid_backward(g, sigmoid(inp[0])),))
LEAKY_RELU = DiffOp("leaky_relu", leaky_relu, lambda inp, g: (leaky_relu_backward(g, inp[0]),))
CHANNEL_SOFTMAX = DiffOp(
    "channel_softmax", channel_softmax,
    lambda inp, g: (channel_softmax_backward(g, channel_softmax(inp[0])),))
CONCAT = DiffOp("concat", concat, lambda inp, g: concat_backward(g, inp[0].shape[0]))
BILINEAR_SAMPLE = DiffOp("bilinear_sample", bilinear_sample, _bilinear_bwd)
AVG_POOL2 = DiffOp("avg_pool2", avg_pool2, lambda inp, g: (avg_pool2_backward(g),))
UPSAMPLE2 = DiffOp("upsample2", upsample2, lambda inp, g: (upsample2_backward(g),))

"""Toy motion-estimation / residual-reconstruction networks.

A model is a set of named parameter arrays (:class:`ModelState`) plus two
configuration records.  The forward pass has two stages:

1. *encode*: one or two small encoder-decoders turn the blurred input into a
   motion feature ``F_M`` (drives the filter) and a residual feature ``F_R``
   (drives the residual head).  How the two networks are wired is the
   coupling strategy.
2. *filter*: ``F_M`` drives motion-guided alignment and the separable
   collaborative filter; ``F_R`` predicts the image residual ``dI``.  With
   filter-first order ``out = SCF(MGA(I)) + dI``; with residual-first order
   ``out = SCF(MGA(I + dI))``.

Coupling realisations (how latent encodings pass between the two networks
is a design choice; these are the definitions used here):

=============  ==============================================================
parallel       two independent encoder-decoders on the input
semi_parallel  the first network's output feature, pooled to the bottleneck,
               is concatenated into the second network's bottleneck
serial         the second network's input is ``concat(I, first's feature)``
semi_shared    one shared encoder, separate decoders
shared         one encoder-decoder feeds every head
=============  ==============================================================

The "first" network is the motion network for filter-first order and the
residual network for residual-first order.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import mga, scf
from .exceptions import ConfigurationError, InputError
from .tensor import (
    COMPUTE_DTYPE,
    avg_pool2,
    avg_pool2_backward,
    concat,
    conv2d,
    conv2d_backward,
    leaky_relu,
    leaky_relu_backward,
    upsample2,
    upsample2_backward,
)


class Strategy(str, Enum):
    PARALLEL = "parallel"
    SEMI_PARALLEL = "semi_parallel"
    SERIAL = "serial"
    SEMI_SHARED = "semi_shared"
    SHARED = "shared"


class Order(str, Enum):
    FILTER_FIRST = "filter_first"
    RESIDUAL_FIRST = "residual_first"


_GROUPS = {
    "a": (Strategy.PARALLEL, Order.FILTER_FIRST),
    "b": (Strategy.PARALLEL, Order.RESIDUAL_FIRST),
    "c": (Strategy.SEMI_PARALLEL, Order.FILTER_FIRST),
    "d": (Strategy.SEMI_PARALLEL, Order.RESIDUAL_FIRST),
    "e": (Strategy.SEMI_SHARED, Order.FILTER_FIRST),
    "f": (Strategy.SEMI_SHARED, Order.RESIDUAL_FIRST),
    "g": (Strategy.SERIAL, Order.FILTER_FIRST),
    "h": (Strategy.SERIAL, Order.RESIDUAL_FIRST),
    "i": (Strategy.SHARED, Order.FILTER_FIRST),
    "j": (Strategy.SHARED, Order.RESIDUAL_FIRST),
}


@dataclass(frozen=True)
class CouplingConfig:
    strategy: Strategy = Strategy.SHARED
    order: Order = Order.FILTER_FIRST

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "order", Order(self.order))

    @classmethod
    def from_group(cls, letter):
        try:
            return cls(*_GROUPS[letter.lower()])
        except KeyError:
            raise ConfigurationError(f"unknown coupling group {letter!r}; expected a-j") from None

    @property
    def group(self):
        for letter, combo in _GROUPS.items():
            if combo == (self.strategy, self.order):
                return letter
        raise AssertionError("unreachable")

    @classmethod
    def all(cls):
        return [cls.from_group(letter) for letter in sorted(_GROUPS)]


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyperparameters.

    ``use_mga``/``use_kernel``/``use_weight``/``use_offset`` switch filter
    components off for ablations; with all four off the model reduces to
    the residual network alone.
    """

    base_channels: int = 16
    depth: int = 2
    kernel_size: int = 7
    max_flow: float = mga.DEFAULT_MAX_FLOW
    head_kernel: int = 1
    use_mga: bool = True
    use_kernel: bool = True
    use_weight: bool = True
    use_offset: bool = True

    def validate(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        if self.depth < 1:
            raise ConfigurationError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigurationError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.head_kernel < 1 or self.head_kernel % 2 == 0:
            raise ConfigurationError(f"head_kernel must be a positive odd integer, got {self.head_kernel}")
        if self.max_flow <= 0:
            raise ConfigurationError(f"max_flow must be positive, got {self.max_flow}")
        return self

    @property
    def use_scf(self):
        return self.use_kernel or self.use_weight or self.use_offset

    @property
    def uses_filter(self):
        return self.use_mga or self.use_scf


@dataclass
class ModelState:
    """All learnable tensors of a model, keyed by stable names."""

    net: NetworkConfig
    coupling: CouplingConfig
    params: dict = field(default_factory=dict)

    @property
    def n_params(self):
        return int(sum(p.size for p in self.params.values()))

    def copy(self):
        return ModelState(self.net, self.coupling, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype):
        return ModelState(self.net, self.coupling, {k: v.astype(dtype) for k, v in self.params.items()})

    def __getitem__(self, name):
        return self.params[name]


# ---------------------------------------------------------------------------
# layer helpers


def _conv(params, name, x):
    return conv2d(x, params[name + ".weight"], params[name + ".bias"])


def _conv_bwd(params, name, x, g, grads, need_input_grad=True):
    gx, gw, gb = conv2d_backward(g, x, params[name + ".weight"], need_input_grad)
    _accumulate(grads, name + ".weight", gw)
    _accumulate(grads, name + ".bias", gb)
    return gx


def _accumulate(grads, name, g):
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


def _conv_act(params, name, x):
    z = _conv(params, name, x)
    return leaky_relu(z), (x, z)


def _conv_act_bwd(params, name, cache, g, grads):
    x, z = cache
    return _conv_bwd(params, name, x, leaky_relu_backward(g, z), grads)


def _pool_n(x, times):
    for _ in range(times):
        x = avg_pool2(x)
    return x


def _pool_n_bwd(g, times):
    for _ in range(times):
        g = avg_pool2_backward(g)
    return g


# ---------------------------------------------------------------------------
# encoder / decoder


def _level_channels(c, level):
    return c * 2 ** level


def _encoder_shapes(prefix, in_ch, c, depth, latent_ch=0):
    shapes = {}
    prev = in_ch
    for level in range(depth + 1):
        ch = _level_channels(c, level)
        extra = latent_ch if level == depth else 0
        shapes[f"{prefix}.enc{level}.conv0"] = (ch, prev + extra, 3)
        shapes[f"{prefix}.enc{level}.conv1"] = (ch, ch, 3)
        prev = ch
    return shapes


def _decoder_shapes(prefix, c, depth):
    shapes = {}
    for level in range(depth - 1, -1, -1):
        ch = _level_channels(c, level)
        shapes[f"{prefix}.dec{level}.conv0"] = (ch, _level_channels(c, level + 1) + ch, 3)
    return shapes


def _encoder(params, prefix, x, depth, latent=None):
    skips, caches = [], []
    h = x
    for level in range(depth + 1):
        if level > 0:
            h = avg_pool2(h)
        if level == depth and latent is not None:
            h = concat(h, _pool_n(latent, depth))
        h, c0 = _conv_act(params, f"{prefix}.enc{level}.conv0", h)
        h, c1 = _conv_act(params, f"{prefix}.enc{level}.conv1", h)
        skips.append(h)
        caches.append((c0, c1))
    return skips, caches


def _encoder_bwd(params, prefix, caches, g_skips, depth, grads, latent_ch=0):
    """Returns ``(g_x, g_latent)``; ``g_latent`` is None without latent."""
    g_h = g_skips[depth]
    g_latent = None
    for level in range(depth, -1, -1):
        c0, c1 = caches[level]
        g_h = _conv_act_bwd(params, f"{prefix}.enc{level}.conv1", c1, g_h, grads)
        g_h = _conv_act_bwd(params, f"{prefix}.enc{level}.conv0", c0, g_h, grads)
        if level == depth and latent_ch:
            split = g_h.shape[0] - latent_ch
            g_latent = _pool_n_bwd(g_h[split:], depth)
            g_h = g_h[:split]
        if level > 0:
            g_h = avg_pool2_backward(g_h)
            if g_skips[level - 1] is not None:
                g_h = g_h + g_skips[level - 1]
    return g_h, g_latent


def _decoder(params, prefix, skips, depth):
    outs = [None] * (depth + 1)
    caches = [None] * depth
    d = skips[depth]
    outs[depth] = d
    for level in range(depth - 1, -1, -1):
        x = concat(upsample2(d), skips[level])
        d, caches[level] = _conv_act(params, f"{prefix}.dec{level}.conv0", x)
        outs[level] = d
    return outs, caches


def _decoder_bwd(params, prefix, caches, g_outs, skips, depth, grads):
    """Returns gradients w.r.t. each encoder skip."""
    g_skips = [None] * (depth + 1)
    g_d = g_outs[0]
    for level in range(depth):
        g_x = _conv_act_bwd(params, f"{prefix}.dec{level}.conv0", caches[level], g_d, grads)
        up_ch = g_x.shape[0] - skips[level].shape[0]
        g_skips[level] = g_x[up_ch:]
        g_d = upsample2_backward(g_x[:up_ch])
        if g_outs[level + 1] is not None:
            g_d = g_d + g_outs[level + 1]
    g_skips[depth] = g_d
    return g_skips


def _add_opt(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


class _UNet:
    """Encoder + decoder under one name prefix."""

    def __init__(self, prefix, depth, enc_prefix=None, latent_ch=0):
        self.prefix = prefix
        self.enc_prefix = enc_prefix or prefix
        self.depth = depth
        self.latent_ch = latent_ch

    def forward(self, params, x, latent=None, skips=None):
        enc_cache = None
        if skips is None:
            skips, enc_cache = _encoder(params, self.enc_prefix, x, self.depth, latent)
        outs, dec_cache = _decoder(params, self.prefix, skips, self.depth)
        return outs, (skips, enc_cache, dec_cache)

    def backward_decoder(self, params, cache, g_outs, grads):
        skips, _, dec_cache = cache
        return _decoder_bwd(params, self.prefix, dec_cache, g_outs, skips, self.depth, grads)

    def backward_encoder(self, params, cache, g_skips, grads):
        _, enc_cache, _ = cache
        return _encoder_bwd(params, self.enc_prefix, enc_cache, g_skips, self.depth, grads, self.latent_ch)


# ---------------------------------------------------------------------------
# parameter layout


def param_shapes(net, coupling):
    """Ordered mapping ``name -> (out, in, k)`` for every conv layer."""
    net.validate()
    c, depth = net.base_channels, net.depth
    s = Strategy(coupling.strategy)
    shapes = {}
    if s is Strategy.SHARED:
        shapes.update(_encoder_shapes("shared", 3, c, depth))
        shapes.update(_decoder_shapes("shared", c, depth))
    elif s is Strategy.SEMI_SHARED:
        shapes.update(_encoder_shapes("shared", 3, c, depth))
        shapes.update(_decoder_shapes("motion", c, depth))
        shapes.update(_decoder_shapes("residual", c, depth))
    else:
        first, second = _first_second(coupling)
        in2 = 3 + c if s is Strategy.SERIAL else 3
        latent = c if s is Strategy.SEMI_PARALLEL else 0
        shapes.update(_encoder_shapes(first, 3, c, depth))
        shapes.update(_decoder_shapes(first, c, depth))
        shapes.update(_encoder_shapes(second, in2, c, depth, latent))
        shapes.update(_decoder_shapes(second, c, depth))
    hk = net.head_kernel
    n = net.kernel_size
    if net.use_mga:
        shapes["head.flow"] = (2, c, hk)
        shapes["head.mask"] = (1, c, hk)
    if net.use_kernel:
        shapes["head.kernel"] = (2 * n, 2 * c, hk)
    if net.use_offset:
        shapes["head.offset"] = (2 * n * n, 2 * c, hk)
    if net.use_weight:
        shapes["head.weight"] = (n * n, 2 * c, hk)
    shapes["head.residual"] = (3, c, hk)
    shapes["head.aux"] = (3, 2 * c, hk)
    return shapes


def _first_second(coupling):
    if Order(coupling.order) is Order.FILTER_FIRST:
        return "motion", "residual"
    return "residual", "motion"


# estimator heads whose final layer starts at zero; the kernel head starts at
# zero weights with unit bias so the initial filter is a uniform box
_ZERO_HEADS = ("head.flow", "head.offset", "head.weight", "head.residual", "head.aux", "head.kernel")


def build_model(net=None, coupling=None, seed=0, dtype=COMPUTE_DTYPE):
    """Deterministically initialise a model.

    Backbone convolutions use He-normal weights for the leaky rectifier;
    estimator heads start at zero so the untrained model aligns with zero
    flow, filters with a uniform ``n x n`` box and adds no residual.  The
    mask head gets small random weights: at zero flow and a constant 0.5
    mask neither the flow nor the mask receives a gradient.
    """
    net = (net or NetworkConfig()).validate()
    coupling = coupling or CouplingConfig()
    rng = np.random.default_rng(seed)
    params = {}
    for name, (o, i, k) in param_shapes(net, coupling).items():
        fan_in = i * k * k
        if name in _ZERO_HEADS:
            w = np.zeros((o, i, k, k))
        elif name == "head.mask":
            w = rng.standard_normal((o, i, k, k)) * 0.1 / np.sqrt(fan_in)
        else:
            w = rng.standard_normal((o, i, k, k)) * np.sqrt(2.0 / (1.01 * fan_in))
        b = np.ones(o) if name == "head.kernel" else np.zeros(o)
        params[name + ".weight"] = w.astype(dtype)
        params[name + ".bias"] = b.astype(dtype)
    return ModelState(net, coupling, params)


# ---------------------------------------------------------------------------
# forward / backward


def _encode(state, image):
    """Stage one: returns ``(F_M, F_R, half_feature, cache)``."""
    p = state.params
    depth = state.net.depth
    c = state.net.base_channels
    s = state.coupling.strategy
    if s is Strategy.SHARED:
        u = _UNet("shared", depth)
        outs, cache = u.forward(p, image)
        return outs[0], outs[0], outs[1], (u, cache)
    if s is Strategy.SEMI_SHARED:
        skips, enc_cache = _encoder(p, "shared", image, depth)
        um, ur = _UNet("motion", depth, "shared"), _UNet("residual", depth, "shared")
        outs_m, cm = um.forward(p, None, skips=skips)
        outs_r, cr = ur.forward(p, None, skips=skips)
        return outs_m[0], outs_r[0], outs_r[1], (skips, enc_cache, um, cm, ur, cr)
    first, second = _first_second(state.coupling)
    u1 = _UNet(first, depth)
    outs1, c1 = u1.forward(p, image)
    if s is Strategy.PARALLEL:
        u2 = _UNet(second, depth)
        outs2, c2 = u2.forward(p, image)
    elif s is Strategy.SEMI_PARALLEL:
        u2 = _UNet(second, depth, latent_ch=c)
        outs2, c2 = u2.forward(p, image, latent=outs1[0])
    else:
        u2 = _UNet(second, depth)
        outs2, c2 = u2.forward(p, concat(image, outs1[0]))
    feats = {first: outs1, second: outs2}
    return feats["motion"][0], feats["residual"][0], feats["residual"][1], (u1, c1, u2, c2)


def _encode_bwd(state, cache, g_fm, g_fr, g_half, grads):
    p = state.params
    depth = state.net.depth
    s = state.coupling.strategy
    if s is Strategy.SHARED:
        u, ucache = cache
        g_outs = [None] * (depth + 1)
        g_outs[0] = _add_opt(g_fm, g_fr)
        g_outs[1] = g_half
        g_skips = u.backward_decoder(p, ucache, g_outs, grads)
        u.backward_encoder(p, ucache, g_skips, grads)
        return
    if s is Strategy.SEMI_SHARED:
        skips, enc_cache, um, cm, ur, cr = cache
        g_m = [None] * (depth + 1)
        g_m[0] = g_fm
        g_r = [None] * (depth + 1)
        g_r[0] = g_fr
        g_r[1] = _add_opt(g_r[1], g_half)
        gs_m = um.backward_decoder(p, cm, g_m, grads)
        gs_r = ur.backward_decoder(p, cr, g_r, grads)
        g_skips = [_add_opt(a, b) for a, b in zip(gs_m, gs_r)]
        _encoder_bwd(p, "shared", enc_cache, g_skips, depth, grads)
        return
    u1, c1, u2, c2 = cache
    first, second = _first_second(state.coupling)
    g_top = {"motion": g_fm, "residual": g_fr}
    g2 = [None] * (depth + 1)
    g2[0] = g_top[second]
    g1 = [None] * (depth + 1)
    g1[0] = g_top[first]
    if second == "residual":
        g2[1] = _add_opt(g2[1], g_half)
    else:
        g1[1] = _add_opt(g1[1], g_half)
    g_skips2 = u2.backward_decoder(p, c2, g2, grads)
    g_in2, g_latent = u2.backward_encoder(p, c2, g_skips2, grads)
    if s is Strategy.SEMI_PARALLEL:
        g1[0] = _add_opt(g1[0], g_latent)
    elif s is Strategy.SERIAL:
        g1[0] = _add_opt(g1[0], g_in2[3:])
    g_skips1 = u1.backward_decoder(p, c1, g1, grads)
    u1.backward_encoder(p, c1, g_skips1, grads)


def _heads(p, name):
    return (p[name + ".weight"], p[name + ".bias"])


def _check_input(state, image):
    if image.ndim < 3 or image.shape[0] != 3:
        raise InputError(f"expected a 3-channel image (3, [N,] H, W), got shape {image.shape}")
    H, W = image.shape[-2:]
    f = 2 ** state.net.depth
    if H % f or W % f:
        raise InputError(f"image size {H}x{W} must be divisible by {f} (pad the input)")


def forward(state, image, return_cache=False):
    """Run the model on ``image`` of shape ``(3, H, W)`` or ``(3, N, H, W)``.

    Returns
    -------
    output : ndarray
        Deblurred image, same shape as ``image``.
    inter : dict
        ``flow`` (o), ``mask`` (m), ``aligned`` (I'), ``filtered`` (I''),
        ``residual`` (dI) and ``half`` (half-resolution auxiliary output).
        ``flow``/``mask`` are None when alignment is disabled.
    """
    _check_input(state, image)
    net, p = state.net, state.params
    image = image.astype(next(iter(p.values())).dtype, copy=False)
    first_order = state.coupling.order is Order.FILTER_FIRST
    f_m, f_r, half_feat, enc_cache = _encode(state, image)
    d_i = _conv(p, "head.residual", f_r)
    src = image if first_order else image + d_i
    align = None
    if net.use_mga:
        align = mga.mga_align(src, f_m, _heads(p, "head.flow"), _heads(p, "head.mask"), net.max_flow)
        aligned, f_aligned = align.image, align.feature
    else:
        aligned, f_aligned = src, f_m
    params = None
    if net.use_scf:
        params = scf.estimate_params(
            f_m, f_aligned,
            _heads(p, "head.kernel") if net.use_kernel else None,
            _heads(p, "head.offset") if net.use_offset else None,
            _heads(p, "head.weight") if net.use_weight else None,
            net.kernel_size, net.use_kernel, net.use_offset, net.use_weight)
        filtered = scf.scf_filter(aligned, params)
    else:
        filtered = aligned
    out = filtered + d_i if first_order else filtered
    half = avg_pool2(image) + _conv(p, "head.aux", half_feat)
    inter = {
        "flow": None if align is None else align.flow,
        "mask": None if align is None else align.mask,
        "aligned": aligned,
        "filtered": filtered,
        "residual": d_i,
        "half": half,
    }
    if return_cache:
        cache = dict(image=image, src=src, f_m=f_m, f_r=f_r, half_feat=half_feat, enc=enc_cache,
                     align=align, f_aligned=f_aligned, scf=params, aligned=aligned)
        return out, inter, cache
    return out, inter


def backward(state, cache, g_out, g_half=None):
    """Gradients of a scalar loss w.r.t. every parameter.

    ``g_out`` and ``g_half`` are the loss gradients w.r.t. the full and
    half-resolution outputs.  Returns a dict keyed like ``state.params``.
    """
    net, p = state.net, state.params
    first_order = state.coupling.order is Order.FILTER_FIRST
    grads = {}
    g_half_feat = None
    if g_half is not None:
        g_half_feat = _conv_bwd(p, "head.aux", cache["half_feat"], g_half, grads)
    else:
        _accumulate(grads, "head.aux.weight", np.zeros_like(p["head.aux.weight"]))
        _accumulate(grads, "head.aux.bias", np.zeros_like(p["head.aux.bias"]))
    f_m = cache["f_m"]
    g_fm = np.zeros_like(f_m)
    if net.use_scf:
        params = cache["scf"]
        g_aligned, g_params = scf.scf_filter_backward(g_out, cache["aligned"], params)
        g_fm_s, g_faligned, head_grads = scf.estimate_params_backward(
            g_params, f_m, cache["f_aligned"], params,
            _heads(p, "head.kernel") if net.use_kernel else None,
            _heads(p, "head.offset") if net.use_offset else None,
            _heads(p, "head.weight") if net.use_weight else None,
            net.use_kernel, net.use_offset, net.use_weight)
        g_fm += g_fm_s
        for name, (gw, gb) in head_grads.items():
            _accumulate(grads, f"head.{name}.weight", gw)
            _accumulate(grads, f"head.{name}.bias", gb)
    else:
        g_aligned = g_out
        g_faligned = np.zeros_like(f_m)
    need_src = not first_order
    if net.use_mga:
        g_src, g_fm_a, (gwf, gbf), (gwm, gbm) = mga.mga_align_backward(
            g_aligned, g_faligned, cache["src"], f_m, _heads(p, "head.flow"), _heads(p, "head.mask"),
            cache["align"], net.max_flow, need_image_grad=need_src)
        g_fm += g_fm_a
        for name, gw, gb in (("head.flow", gwf, gbf), ("head.mask", gwm, gbm)):
            _accumulate(grads, name + ".weight", gw)
            _accumulate(grads, name + ".bias", gb)
    else:
        g_src = g_aligned
        g_fm += g_faligned
    g_di = g_out if first_order else g_src
    g_fr = _conv_bwd(p, "head.residual", cache["f_r"], g_di, grads)
    _encode_bwd(state, cache["enc"], g_fm, g_fr, g_half_feat, grads)
    for name, v in p.items():
        if name not in grads:
            grads[name] = np.zeros_like(v)
    return {name: grads[name].astype(p[name].dtype, copy=False) for name in p}

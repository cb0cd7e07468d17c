"""Losses, Adam, cosine learning-rate schedule, training loop and ablations."""

import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as mdl
from .blur import augment, is_validation
from .exceptions import ConfigurationError, InputError, NumericError
from .metrics import MetricReport, format_db
from .tensor import (
    VERIFY_DTYPE,
    DiffOp,
    GradcheckReport,
    avg_pool2,
    numerical_gradient,
    relative_error,
)

logger = logging.getLogger(__name__)

CHARBONNIER_EPS = 1e-3


@dataclass(frozen=True)
class TrainConfig:
    lr_start: float = 2e-4
    lr_end: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 8
    patch: int = 64
    steps: int = 1000
    weight_full: float = 1.0
    weight_half: float = 0.5
    seed: int = 0
    val_every: int = 0
    log_every: int = 1

    def validate(self):
        if self.steps < 0:
            raise ConfigurationError(f"steps must be >= 0, got {self.steps}")
        if self.lr_end > self.lr_start:
            raise ConfigurationError(f"lr_end {self.lr_end} exceeds lr_start {self.lr_start}")
        if self.batch < 1:
            raise ConfigurationError(f"batch must be >= 1, got {self.batch}")
        return self

    @property
    def scale_weights(self):
        return (self.weight_full, self.weight_half)


# ---------------------------------------------------------------------------
# loss


def charbonnier(pred, target, eps=CHARBONNIER_EPS):
    d = pred - target
    return float(np.mean(np.sqrt(d * d + eps * eps)))


def charbonnier_backward(pred, target, eps=CHARBONNIER_EPS):
    d = pred - target
    return d / np.sqrt(d * d + eps * eps) / d.size


def loss(preds, targets, weights=(1.0, 0.5), eps=CHARBONNIER_EPS):
    """Weighted sum over scales of the mean Charbonnier distance."""
    if len(preds) != len(targets) or len(preds) > len(weights):
        raise ConfigurationError("prediction/target pyramids and weights must align")
    total = 0.0
    for p, t, w in zip(preds, targets, weights):
        if p.shape != t.shape:
            raise InputError(f"pyramid shape mismatch {p.shape} vs {t.shape}")
        total += w * charbonnier(p, t, eps)
    return total


def loss_backward(preds, targets, weights=(1.0, 0.5), eps=CHARBONNIER_EPS):
    """Gradient of :func:`loss` w.r.t. each prediction."""
    return [w * charbonnier_backward(p, t, eps) for p, t, w in zip(preds, targets, weights)]


def target_pyramid(sharp):
    return [sharp, avg_pool2(sharp)]


def loss_and_grads(state, blurred, sharp, weights=(1.0, 0.5)):
    """Forward, two-scale loss and parameter gradients for one batch."""
    out, inter, cache = mdl.forward(state, blurred, return_cache=True)
    targets = target_pyramid(sharp.astype(out.dtype, copy=False))
    preds = [out, inter["half"]]
    value = loss(preds, targets, weights)
    g_out, g_half = loss_backward(preds, targets, weights)
    grads = mdl.backward(state, cache, g_out.astype(out.dtype), g_half.astype(out.dtype))
    return value, grads, out, inter


def _loss_forward(out, half, sharp, target_half):
    return np.array(loss([out, half], [sharp, target_half]))


def _loss_backward(inputs, g):
    g_out, g_half = loss_backward(inputs[:2], inputs[2:])
    return g * g_out, g * g_half, None, None


LOSS = DiffOp("loss", _loss_forward, _loss_backward)


def randomize_params(state, seed=0, scale=0.3):
    """Overwrite every parameter with fan-in scaled Gaussian noise (in place).

    Zero-initialised heads make many gradients vanish identically, which a
    gradient check cannot distinguish from a missing term.
    """
    rng = np.random.default_rng(seed)
    for name in sorted(state.params):
        v = state.params[name]
        fan_in = v[0].size if v.ndim > 1 else 1
        v[...] = rng.normal(0.0, scale / np.sqrt(fan_in), v.shape)
    return state


def gradcheck_model(state, blurred, sharp, tolerance=1e-2, eps=1e-6):
    """Central-difference check of :func:`loss_and_grads` for every parameter.

    Returns a :class:`GradcheckReport` with one error per parameter array.
    """
    state = state.astype(VERIFY_DTYPE)
    blurred = np.asarray(blurred, dtype=VERIFY_DTYPE)
    sharp = np.asarray(sharp, dtype=VERIFY_DTYPE)
    _, grads, _, _ = loss_and_grads(state, blurred, sharp)
    targets = target_pyramid(sharp)

    def f():
        out, inter = mdl.forward(state, blurred)
        return loss([out, inter["half"]], targets)

    report = GradcheckReport(f"model[{state.coupling.group}]", tolerance=tolerance)
    for name in sorted(state.params):
        num = numerical_gradient(f, state.params[name], eps)
        report.errors.append(relative_error(grads[name], num))
    return report


# ---------------------------------------------------------------------------
# optimiser and schedule


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    skipped: int = 0


def adam_step(params, grads, opt, lr, cfg=TrainConfig()):
    """One bias-corrected Adam update of ``params`` in place.

    Returns False (and counts a skip) without touching anything if any
    gradient is non-finite.
    """
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        opt.skipped += 1
        return False
    opt.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1 ** opt.t
    c2 = 1 - b2 ** opt.t
    for name, g in grads.items():
        p = params[name]
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p)
            opt.v[name] = np.zeros_like(p)
        v = opt.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.dtype, copy=False)
    return True


def cosine_lr(t, cfg=TrainConfig()):
    """Cosine annealing from ``lr_start`` at ``t=0`` to ``lr_end`` at ``t=steps``."""
    steps = max(cfg.steps, 1)
    t = min(max(t, 0), steps)
    return cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1 + math.cos(math.pi * t / steps))


# ---------------------------------------------------------------------------
# data handling


def stack_images(images):
    """List of ``3 x H x W`` arrays -> one ``3 x N x H x W`` batch."""
    return np.ascontiguousarray(np.stack(images, axis=1))


def split_pairs(pairs, fraction=0.1):
    train, val = [], []
    for p in pairs:
        (val if is_validation(p.id, fraction) else train).append(p)
    return train, val


def predict(state, blurred, chunk=16):
    """Deblur a ``3 x N x H x W`` batch (or a single ``3 x H x W`` image)."""
    if blurred.ndim == 3:
        return predict(state, blurred[:, None], chunk)[:, 0]
    outs = [mdl.forward(state, blurred[:, i:i + chunk])[0] for i in range(0, blurred.shape[1], chunk)]
    return np.concatenate(outs, axis=1)


def evaluate(state, blurred, sharp, names=None):
    """Per-image PSNR/SSIM of model outputs against ``sharp``."""
    pred = predict(state, blurred)
    return report_for(pred, sharp, names)


def report_for(pred, sharp, names=None):
    report = MetricReport()
    n = pred.shape[1]
    names = names or [str(i) for i in range(n)]
    for i in range(n):
        report.add(names[i], np.clip(pred[:, i], 0, 1), sharp[:, i])
    return report


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    state: mdl.ModelState
    log: list
    skipped: int = 0

    def log_lines(self):
        return [format_record(r) for r in self.log]


def format_record(record):
    parts = []
    for k, v in record.items():
        if isinstance(v, float):
            v = format_db(v) if k.endswith("psnr") else repr(v)
        parts.append(f"{k}={v}")
    return " ".join(parts)


def _dump_diagnostics(dump_dir, inter, step):
    from .io import save_tensor

    os.makedirs(dump_dir, exist_ok=True)
    for name, arr in inter.items():
        if arr is not None:
            save_tensor(os.path.join(dump_dir, f"step{step}_{name}.mten"), np.asarray(arr))


def train(state, blurred, sharp, cfg=TrainConfig(), val=None, callback=None, dump_dir=None):
    """Train ``state`` in place on ``3 x N x H x W`` image stacks.

    Each step draws ``cfg.batch`` random pairs, augments them with the same
    random flips/rotation for sharp and blurred, and takes one Adam step at
    the cosine-annealed learning rate.  ``val`` is an optional
    ``(blurred, sharp)`` pair evaluated every ``cfg.val_every`` steps and at
    the end.  Two consecutive non-finite losses abort with
    :class:`NumericError` (after dumping the intermediates to ``dump_dir``).
    """
    cfg.validate()
    if blurred.shape != sharp.shape or blurred.ndim != 4:
        raise InputError(f"expected matching 3 x N x H x W stacks, got {blurred.shape} and {sharp.shape}")
    dtype = next(iter(state.params.values())).dtype if state.params else np.float32
    blurred = blurred.astype(dtype, copy=False)
    sharp = sharp.astype(dtype, copy=False)
    rng = np.random.default_rng(cfg.seed)
    opt = AdamState()
    log = []
    bad = 0
    n = blurred.shape[1]
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, n, size=cfg.batch)
        xb, yb = [], []
        for i in idx:
            seed = int(rng.integers(2 ** 31))
            xb.append(augment(blurred[:, i], np.random.default_rng(seed)))
            yb.append(augment(sharp[:, i], np.random.default_rng(seed)))
        xb, yb = stack_images(xb), stack_images(yb)
        lr = cosine_lr(step - 1, cfg)
        try:
            value, grads, _, inter = loss_and_grads(state, xb, yb, cfg.scale_weights)
        except NumericError as exc:
            logger.warning("step %d: %s", step, exc)
            value, inter = float("nan"), {}
        if not math.isfinite(value):
            bad += 1
            opt.skipped += 1
            if bad >= 2:
                if dump_dir:
                    _dump_diagnostics(dump_dir, dict(inter, input=xb, target=yb), step)
                raise NumericError(f"non-finite loss at steps {step - 1} and {step}")
            continue
        bad = 0
        adam_step(state.params, grads, opt, lr, cfg)
        record = None
        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps):
            record = {"step": step, "lr": lr, "loss": value}
        if val is not None and ((cfg.val_every and step % cfg.val_every == 0) or step == cfg.steps):
            rep = evaluate(state, *val)
            record = record or {"step": step, "lr": lr, "loss": value}
            record.update(val_psnr=rep.mean_psnr, val_ssim=rep.mean_ssim)
        if record is not None:
            log.append(record)
            if callback:
                callback(record)
    return TrainResult(state, log, opt.skipped)


def train_from_pairs(state, pairs, cfg=TrainConfig(), **kwargs):
    """Train on :class:`SamplePair` objects, holding out the hashed 10% split."""
    tr, va = split_pairs(pairs)
    if not tr:
        raise InputError("training split is empty")
    blurred = stack_images([p.blurred for p in tr])
    sharp = stack_images([p.sharp for p in tr])
    val = None
    if va:
        val = (stack_images([p.blurred for p in va]), stack_images([p.sharp for p in va]))
    return train(state, blurred, sharp, cfg, val=val, **kwargs)


def smoothed(values, window=100):
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def quartile_means(values):
    q = np.array_split(np.asarray(values, dtype=np.float64), 4)
    return [float(np.mean(part)) for part in q]


# ---------------------------------------------------------------------------
# ablations


@dataclass
class Variant:
    name: str
    net: mdl.NetworkConfig
    coupling: mdl.CouplingConfig


def coupling_variants(net=mdl.NetworkConfig()):
    return [Variant(f"coupling_{c.group}", net, c) for c in mdl.CouplingConfig.all()]


# rows of the component ablation: (name, mga, kernel, weight, offset)
COMPONENT_ROWS = [
    ("base", False, False, False, False),
    ("mga", True, False, False, False),
    ("mga+kernel", True, True, False, False),
    ("mga+kernel+weight", True, True, True, False),
    ("mga+kernel+offset", True, True, False, True),
    ("kernel+weight+offset", False, True, True, True),
    ("full", True, True, True, True),
]


def component_variants(net=mdl.NetworkConfig(), coupling=mdl.CouplingConfig()):
    return [Variant(f"component_{name}",
                    replace(net, use_mga=a, use_kernel=k, use_weight=w, use_offset=o), coupling)
            for name, a, k, w, o in COMPONENT_ROWS]


def kernel_size_variants(net=mdl.NetworkConfig(), coupling=mdl.CouplingConfig(), sizes=(3, 5, 7)):
    return [Variant(f"kernel_n{n}", replace(net, kernel_size=n), coupling) for n in sizes]


@dataclass
class AblationRow:
    name: str
    group: str
    n_params: int
    psnr: float = float("nan")
    ssim: float = float("nan")
    error: str = ""

    def line(self):
        if self.error:
            return f"variant={self.name} group={self.group} params={self.n_params} error={self.error!r}"
        return (f"variant={self.name} group={self.group} params={self.n_params} "
                f"psnr={format_db(self.psnr)} ssim={self.ssim:.6f}")


def ablate(variants, pairs, cfg=TrainConfig(), model_seed=0):
    """Train every variant from the same seeds and tabulate validation metrics.

    A failing variant is recorded with its error and the run continues.
    """
    tr, va = split_pairs(pairs)
    if not va:
        va = tr
    xb = stack_images([p.blurred for p in tr])
    yb = stack_images([p.sharp for p in tr])
    xv = stack_images([p.blurred for p in va])
    yv = stack_images([p.sharp for p in va])
    rows = []
    for v in variants:
        n_params = 0
        try:
            state = mdl.build_model(v.net, v.coupling, seed=model_seed)
            n_params = state.n_params
            train(state, xb, yb, cfg)
            rep = evaluate(state, xv, yv)
            rows.append(AblationRow(v.name, v.coupling.group, n_params, rep.mean_psnr, rep.mean_ssim))
        except Exception as exc:  # noqa: BLE001 - a failed variant must not stop the table
            logger.warning("variant %s failed: %s", v.name, exc)
            rows.append(AblationRow(v.name, v.coupling.group, n_params, error=str(exc)))
        logger.info(rows[-1].line())
    return rows


def ranking_note(rows):
    """Whether the shared/filter-first coupling (group i) ranks first by PSNR."""
    coupling = [r for r in rows if r.name.startswith("coupling_") and not r.error]
    if not coupling:
        return "coupling ranking: no coupling rows"
    best = max(coupling, key=lambda r: r.psnr)
    verdict = "yes" if best.group == "i" else "no"
    return f"shared_filter_first_ranks_first={verdict} best={best.name} best_psnr={format_db(best.psnr)}"

"""Fast oracle and invariant checks runnable on an installed build.

Each check returns ``(passed, detail)``; :func:`run_all` yields one result
per property so the command line can print a pass/fail table.
"""

import math
import time
from dataclasses import dataclass

import numpy as np

from . import blur, io, mga, model, scf, tensor, train
from .metrics import psnr, ssim


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.detail} ({self.seconds:.2f}s)"


def random_scf_params(rng, n, shape, dtype=np.float32, offset_scale=1.5):
    """Random valid filter parameters: positive kernels, softmax weights."""
    logits = rng.normal(size=(n * n, *shape))
    return scf.ScfParams(
        rng.uniform(0.2, 1.5, (n, *shape)).astype(dtype),
        rng.uniform(0.2, 1.5, (n, *shape)).astype(dtype),
        (offset_scale * rng.normal(size=(n * n, *shape))).astype(dtype),
        (offset_scale * rng.normal(size=(n * n, *shape))).astype(dtype),
        tensor.channel_softmax(logits).astype(dtype),
    )


def identity_params(n, shape, dtype=np.float32):
    """One-hot centre kernels, zero offsets, all weight on the centre tap."""
    r = n // 2
    k = np.zeros((n, *shape), dtype=dtype)
    k[r] = 1
    w = np.zeros((n * n, *shape), dtype=dtype)
    w[r * n + r] = 1
    zeros = np.zeros((n * n, *shape), dtype=dtype)
    return scf.ScfParams(k, k.copy(), zeros, zeros.copy(), w)


def check_separability(instances=5, size=16, sizes=(1, 3, 5, 7), tol=1e-5):
    rng = np.random.default_rng(0)
    worst = 0.0
    for n in sizes:
        for _ in range(instances):
            img = rng.uniform(size=(3, size, size)).astype(np.float32)
            p = random_scf_params(rng, n, (size, size))
            diff = np.abs(scf.scf_filter(img, p) - scf.scf_filter_bruteforce(img, p)).max()
            worst = max(worst, float(diff))
    return worst <= tol, f"max|fast-bruteforce|={worst:.2e} tol={tol:g}"


def check_identity(tol=1e-7):
    rng = np.random.default_rng(1)
    worst = 0.0
    for n in (1, 3, 5, 7):
        img = rng.uniform(size=(3, 12, 12)).astype(np.float32)
        worst = max(worst, float(np.abs(scf.scf_filter(img, identity_params(n, (12, 12))) - img).max()))
    return worst <= tol, f"max|out-in|={worst:.2e} tol={tol:g}"


def check_zero_flow(pairs=20):
    rng = np.random.default_rng(2)
    exact = 0
    for _ in range(pairs):
        img = rng.uniform(size=(3, 10, 12)).astype(np.float32)
        feat = rng.normal(size=(4, 10, 12)).astype(np.float32)
        mask = rng.uniform(size=(1, 10, 12)).astype(np.float32)
        o = np.zeros((2, 10, 12), dtype=np.float32)
        ok_i = np.array_equal(mga.bidirectional_warp(o, mask, img), img)
        ok_f = np.array_equal(mga.bidirectional_warp(o, mask, feat), feat)
        exact += ok_i and ok_f
    return exact == pairs, f"{exact}/{pairs} pairs returned bit-exactly"


def gradcheck_cases(rng, instances=3):
    """``(op, inputs, wrt)`` triples covering every differentiable primitive."""
    cases = []
    for _ in range(instances):
        x = rng.normal(size=(3, 2, 6, 7))
        cases += [
            (tensor.CONV2D, [x, rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)], None),
            (tensor.SIGMOID, [rng.normal(size=(3, 5, 5)) * 3], None),
            (tensor.LEAKY_RELU, [x + np.sign(x) * 0.05], None),
            (tensor.CHANNEL_SOFTMAX, [rng.normal(size=(9, 4, 4))], None),
            (tensor.CONCAT, [rng.normal(size=(2, 4, 4)), rng.normal(size=(3, 4, 4))], None),
            (tensor.AVG_POOL2, [rng.normal(size=(2, 6, 8))], None),
            (tensor.UPSAMPLE2, [rng.normal(size=(2, 3, 4))], None),
            (tensor.BILINEAR_SAMPLE, [rng.normal(size=(2, 7, 8)),
                                      rng.uniform(0.1, 6.9, (5, 5)) + 0.013,
                                      rng.uniform(0.1, 5.9, (5, 5)) + 0.017], None),
            (mga.WARP, [rng.normal(size=(2, 6, 7)) * 1.3, rng.normal(size=(3, 6, 7))], None),
            (mga.MGA_ALIGN, [rng.uniform(size=(3, 6, 6)), rng.normal(size=(4, 6, 6)),
                             rng.normal(size=(2, 4, 3, 3)) * 0.5, rng.normal(size=2),
                             rng.normal(size=(1, 4, 3, 3)) * 0.5, rng.normal(size=1)], None),
            (scf.SCF_FILTER, [rng.uniform(size=(3, 6, 6))]
             + list(random_scf_params(rng, 3, (6, 6), np.float64, 1.0).as_tuple()), None),
            (train.LOSS, [rng.uniform(size=(3, 6, 6)), rng.uniform(size=(3, 3, 3)),
                          rng.uniform(size=(3, 6, 6)), rng.uniform(size=(3, 3, 3))], [0, 1]),
        ]
    return cases


def check_gradients(instances=3, tol=1e-3):
    rng = np.random.default_rng(3)
    worst = {}
    for op, inputs, wrt in gradcheck_cases(rng, instances):
        rep = tensor.gradcheck(op, inputs, tolerance=tol, wrt=wrt)
        worst[op.name] = max(worst.get(op.name, 0.0), rep.max_error)
    bad = [k for k, v in worst.items() if v > tol]
    detail = f"{len(worst)} ops, worst={max(worst.values()):.2e} tol={tol:g}"
    if bad:
        detail += " failing=" + ",".join(bad)
    return not bad, detail


def check_model_gradient(tol=1e-2):
    rng = np.random.default_rng(4)
    net = model.NetworkConfig(base_channels=2, depth=1, kernel_size=3)
    state = train.randomize_params(model.build_model(net, seed=0, dtype=np.float64), seed=5)
    rep = train.gradcheck_model(state, rng.uniform(size=(3, 8, 8)), rng.uniform(size=(3, 8, 8)), tol)
    return rep.passed, f"{len(rep.errors)} tensors, worst={rep.max_error:.2e} tol={tol:g}"


def check_normalization(tol=1e-6):
    rng = np.random.default_rng(6)
    state = train.randomize_params(model.build_model(model.NetworkConfig(base_channels=4, depth=1), seed=0))
    _, _, cache = model.forward(state, rng.uniform(size=(3, 8, 8)).astype(np.float32), return_cache=True)
    w_err = float(np.abs(cache["scf"].w.astype(np.float64).sum(axis=0) - 1).max())
    psf_err = 0.0
    for _ in range(25):
        k = blur.motion_kernel(rng.uniform(1, 9), rng.uniform(0, math.pi))
        psf_err = max(psf_err, abs(float(k.sum()) - 1))
    ok = w_err <= tol and psf_err <= tol
    return ok, f"weights {w_err:.1e}, psf {psf_err:.1e} tol={tol:g}"


def check_metrics():
    rng = np.random.default_rng(7)
    a = rng.uniform(0.2, 0.8, (3, 16, 16))
    p = psnr(a, a + 0.1)
    s_self = ssim(a, a)
    c, d = 0.3, 0.2
    c1 = 0.01 ** 2
    closed = (2 * c * (c + d) + c1) / (c * c + (c + d) ** 2 + c1)
    s_const = ssim(np.full((3, 16, 16), c), np.full((3, 16, 16), c + d))
    ok = abs(p - 20.0) <= 1e-4 and abs(s_self - 1) <= 1e-9 and abs(s_const - closed) <= 1e-6
    ok = ok and psnr(a, a) == math.inf
    return ok, f"psnr={p:.6f} ssim(x,x)={s_self:.12f} const={s_const:.8f} vs {closed:.8f}"


def check_schedule_and_optimizer():
    cfg = train.TrainConfig(steps=50)
    lrs = [train.cosine_lr(t, cfg) for t in range(cfg.steps + 1)]
    monotone = all(b <= a for a, b in zip(lrs, lrs[1:]))
    params = {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}
    before = params["w"].copy()
    train.adam_step(params, {"w": np.zeros_like(before)}, train.AdamState(), 1e-2, cfg)
    still = np.array_equal(before, params["w"])
    return monotone and still, f"cosine monotone={monotone} adam zero-grad unchanged={still}"


def check_formats():
    rng = np.random.default_rng(8)
    arr = rng.normal(size=(2, 3, 4)).astype(np.float32)
    back, _ = io.decode_tensor(io.encode_tensor(arr))
    state = model.build_model(model.NetworkConfig(base_channels=2, depth=1, kernel_size=3), seed=1)
    loaded = io.decode_model(io.encode_model(state))
    same = all(np.array_equal(state.params[k], loaded.params[k]) for k in state.params)
    ok = np.array_equal(arr, back) and same and loaded.net == state.net
    return ok, f"MTEN round trip={np.array_equal(arr, back)} MMDL round trip={same}"


def check_training_determinism():
    rng = np.random.default_rng(9)
    x = rng.uniform(size=(3, 4, 8, 8)).astype(np.float32)
    y = rng.uniform(size=(3, 4, 8, 8)).astype(np.float32)
    net = model.NetworkConfig(base_channels=2, depth=1, kernel_size=3)
    cfg = train.TrainConfig(steps=3, batch=2, seed=4)
    logs = []
    for _ in range(2):
        res = train.train(model.build_model(net, seed=0), x, y, cfg)
        logs.append(res.log_lines())
    return logs[0] == logs[1], f"{len(logs[0])} log lines identical={logs[0] == logs[1]}"


CHECKS = [
    ("scf_separability", check_separability),
    ("scf_identity", check_identity),
    ("mga_zero_flow", check_zero_flow),
    ("gradients", check_gradients),
    ("model_gradient", check_model_gradient),
    ("normalization", check_normalization),
    ("metrics", check_metrics),
    ("schedule_optimizer", check_schedule_and_optimizer),
    ("file_formats", check_formats),
    ("training_determinism", check_training_determinism),
]


def run_all(names=None):
    """Yield a :class:`CheckResult` per check (optionally filtered by name)."""
    for name, fn in CHECKS:
        if names and name not in names:
            continue
        t = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception as exc:  # noqa: BLE001 - a crashing check is a failed check
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        yield CheckResult(name, bool(passed), detail, time.perf_counter() - t)

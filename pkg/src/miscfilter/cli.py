"""Command line entry point: ``miscfilter <command> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 numeric failure (non-finite training, failed verification).
"""

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from . import blur, imageio, io, model, scf, selftest, tensor, train
from .exceptions import ConfigurationError, FormatError, InputError, NumericError
from .metrics import MetricReport

logger = logging.getLogger("miscfilter")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def seed_streams(seed):
    """Split the one user seed into independent per-purpose integer seeds."""
    children = np.random.SeedSequence(seed).spawn(3)
    return {name: int(c.generate_state(1)[0]) for name, c in zip(("data", "init", "train"), children)}


# ---------------------------------------------------------------------------
# flag groups


def _common(p):
    g = p.add_argument_group("common")
    g.add_argument("--seed", type=int, default=0, help="master seed for every random stream")
    g.add_argument("--threads", type=int, default=1,
                   help="BLAS threads; 1 guarantees bit-reproducible results")
    g.add_argument("--config", help="key=value file; keys are flag names, explicit flags win")
    g.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _model_flags(p):
    d = model.NetworkConfig()
    g = p.add_argument_group("model")
    g.add_argument("--group", choices=list("abcdefghij"), help="coupling group; overrides --strategy/--order")
    g.add_argument("--strategy", default="shared", choices=[s.value for s in model.Strategy])
    g.add_argument("--order", default="filter_first", choices=[o.value for o in model.Order])
    g.add_argument("--base-channels", type=int, default=d.base_channels)
    g.add_argument("--depth", type=int, default=d.depth, help="encoder levels below full resolution")
    g.add_argument("--kernel-size", type=int, default=d.kernel_size, help="filter taps per axis (odd)")
    g.add_argument("--head-kernel", type=int, default=d.head_kernel, help="spatial size of the filter heads")
    g.add_argument("--max-flow", type=float, default=d.max_flow, help="flow magnitude bound in pixels")
    for name in ("mga", "kernel", "weight", "offset"):
        g.add_argument(f"--{name}", dest=f"use_{name}", default=True,
                       action=argparse.BooleanOptionalAction, help=f"enable the {name} component")


def _train_flags(p):
    d = train.TrainConfig()
    g = p.add_argument_group("training")
    g.add_argument("--steps", type=int, default=d.steps)
    g.add_argument("--batch", type=int, default=d.batch)
    g.add_argument("--lr-start", type=float, default=d.lr_start)
    g.add_argument("--lr-end", type=float, default=d.lr_end)
    g.add_argument("--beta1", type=float, default=d.beta1)
    g.add_argument("--beta2", type=float, default=d.beta2)
    g.add_argument("--weight-full", type=float, default=d.weight_full, help="loss weight at full resolution")
    g.add_argument("--weight-half", type=float, default=d.weight_half, help="loss weight at half resolution")
    g.add_argument("--val-every", type=int, default=d.val_every, help="validation period in steps (0: end only)")
    g.add_argument("--log-every", type=int, default=d.log_every)


def _net_from(args):
    net = model.NetworkConfig(
        base_channels=args.base_channels, depth=args.depth, kernel_size=args.kernel_size,
        max_flow=args.max_flow, head_kernel=args.head_kernel, use_mga=args.use_mga,
        use_kernel=args.use_kernel, use_weight=args.use_weight, use_offset=args.use_offset,
    ).validate()
    if args.group:
        coupling = model.CouplingConfig.from_group(args.group)
    else:
        coupling = model.CouplingConfig(args.strategy, args.order)
    return net, coupling


def _train_cfg_from(args, seed):
    return train.TrainConfig(
        lr_start=args.lr_start, lr_end=args.lr_end, beta1=args.beta1, beta2=args.beta2,
        batch=args.batch, steps=args.steps, weight_full=args.weight_full,
        weight_half=args.weight_half, seed=seed, val_every=args.val_every, log_every=args.log_every,
    ).validate()


def build_parser():
    parser = _Parser(prog="miscfilter", description="Toy blind motion deblurring with MGA + SCF.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    cmds = {}

    p = cmds["synth"] = sub.add_parser("synth", help="generate a synthetic blurred/sharp dataset")
    p.add_argument("--out", required=True, help="output directory (PNGs + manifest.txt)")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--patch", type=int, default=64, help="patch side in pixels")
    p.add_argument("--length-min", type=float, default=1.0)
    p.add_argument("--length-max", type=float, default=9.0)
    p.add_argument("--sigma", type=float, default=0.01, help="Gaussian noise standard deviation")
    p.add_argument("--grid", type=int, default=2, help="blur regions per axis (1: uniform blur)")
    p.add_argument("--source-dir", help="crop sharp patches from these images instead of textures")

    p = cmds["train"] = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--data", required=True, help="manifest.txt written by synth")
    p.add_argument("--out", required=True, help="output model file (MMDL)")
    p.add_argument("--log", help="write key=value log records here as well as stdout")
    p.add_argument("--dump-dir", help="where to dump intermediates if training diverges")
    _model_flags(p)
    _train_flags(p)

    p = cmds["apply"] = sub.add_parser("apply", help="deblur one PNG with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--dump-dir", help="write o, m, I', I'', dI as MTEN and PNG")
    p.add_argument("--dump-taps", metavar="X,Y", help="print the filter taps of pixel (X, Y)")

    p = cmds["eval"] = sub.add_parser("eval", help="PSNR/SSIM of predictions against ground truth")
    p.add_argument("--pred", required=True, help="PNG file or directory")
    p.add_argument("--gt", required=True, help="PNG file or directory (matched by file name)")

    p = cmds["ablate"] = sub.add_parser("ablate", help="train variants and tabulate PSNR/SSIM")
    p.add_argument("--data", required=True)
    p.add_argument("--kind", default="all", help="comma list of coupling, component, kernel, or all")
    p.add_argument("--out", help="also write the table here")
    _model_flags(p)
    _train_flags(p)

    p = cmds["gradcheck"] = sub.add_parser("gradcheck", help="central-difference gradient checks")
    p.add_argument("--instances", type=int, default=3, help="random instances per operation")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--model-tolerance", type=float, default=1e-2)
    p.add_argument("--skip-model", action="store_true", help="skip the end-to-end model check")

    p = cmds["selftest"] = sub.add_parser("selftest", help="run the oracle and invariant suite")
    p.add_argument("--only", help="comma list of check names: " + ",".join(n for n, _ in selftest.CHECKS))

    for p in cmds.values():
        _common(p)
    return parser, cmds


def _apply_config(parser, cmds, argv):
    """Parse ``argv``; values from ``--config`` become defaults under explicit flags."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    values = io.read_config_file(args.config)
    sub = cmds[args.command]
    actions = {}
    for action in sub._actions:
        if action.dest in ("help", "config"):
            continue
        actions[action.dest] = action
        for opt in action.option_strings:
            if opt.startswith("--") and not opt.startswith("--no-"):
                actions[opt[2:].replace("-", "_")] = action
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key.replace("-", "_"))
        if action is None:
            raise UsageError(f"{args.config}: unknown key {key!r} for {args.command}")
        dest = action.dest
        if action.nargs == 0:
            if raw.lower() not in ("true", "false", "1", "0"):
                raise UsageError(f"{args.config}: {key} expects true/false, got {raw!r}")
            defaults[dest] = raw.lower() in ("true", "1")
        else:
            defaults[dest] = raw
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, out):
    ranges = blur.SpecRanges(length=(args.length_min, args.length_max),
                             sigma=(args.sigma, args.sigma), grid=args.grid)
    if args.length_min < 1 or args.length_max < args.length_min:
        raise ConfigurationError(f"bad length range [{args.length_min}, {args.length_max}]")
    pairs = blur.generate_dataset(args.out, args.count, ranges, seed=seed_streams(args.seed)["data"],
                                  source_dir=args.source_dir, patch=args.patch)
    out.write(f"pairs={len(pairs)} manifest={Path(args.out) / 'manifest.txt'}\n")
    return EXIT_OK


def cmd_train(args, out):
    seeds = seed_streams(args.seed)
    net, coupling = _net_from(args)
    cfg = _train_cfg_from(args, seeds["train"])
    pairs = blur.load_pairs(args.data)
    state = model.build_model(net, coupling, seed=seeds["init"])
    log_fh = open(args.log, "w") if args.log else None
    try:
        def emit(record):
            line = train.format_record(record)
            out.write(line + "\n")
            if log_fh:
                log_fh.write(line + "\n")
                log_fh.flush()

        result = train.train_from_pairs(state, pairs, cfg, callback=emit, dump_dir=args.dump_dir)
    finally:
        if log_fh:
            log_fh.close()
    io.save_model(result.state, args.out)
    out.write(f"model={args.out} params={result.state.n_params} skipped_steps={result.skipped}\n")
    return EXIT_OK


def _pad_to(img, multiple):
    H, W = img.shape[-2:]
    ph, pw = -H % multiple, -W % multiple
    if not (ph or pw):
        return img
    return np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge")


def flow_to_rgb(flow):
    """Colour-code a ``2 x H x W`` flow: hue = direction, value = magnitude."""
    mag = np.hypot(flow[0], flow[1])
    hue = (np.arctan2(flow[1], flow[0]) % (2 * math.pi)) / (2 * math.pi)
    val = mag / mag.max() if mag.max() > 0 else mag
    hsv = np.stack([hue * 255, np.full_like(hue, 255), val * 255], axis=-1)
    rgb = Image.fromarray(np.round(hsv).astype(np.uint8), mode="HSV").convert("RGB")
    return np.asarray(rgb, dtype=np.float64).transpose(2, 0, 1) / 255.0


def _dump(dump_dir, inter, crop):
    d = Path(dump_dir)
    d.mkdir(parents=True, exist_ok=True)
    H, W = crop
    for key, name in (("flow", "o"), ("mask", "m"), ("aligned", "I_aligned"),
                      ("filtered", "I_filtered"), ("residual", "dI")):
        arr = inter[key]
        if arr is None:
            continue
        arr = np.ascontiguousarray(arr[..., :H, :W])
        io.save_tensor(d / f"{name}.mten", arr)
        if key == "flow":
            png = flow_to_rgb(arr)
        elif key == "residual":
            png = 0.5 + arr
        else:
            png = arr
        imageio.write_png(d / f"{name}.png", png)


def _tap_lines(params, x, y):
    n = params.n
    gx, gy = scf.tap_grid(n)
    for t in range(n * n):
        i, j = divmod(t, n)
        kv, kh, w = params.k_v[i, y, x], params.k_h[j, y, x], params.w[t, y, x]
        sx = x + gx[t] + params.p_x[t, y, x]
        sy = y + gy[t] + params.p_y[t, y, x]
        yield (f"tap={t} i={i} j={j} x={sx:.4f} y={sy:.4f} k_v={kv:.6f} k_h={kh:.6f} "
               f"w={w:.6f} coef={w * kv * kh:.6f}")


def cmd_apply(args, out):
    state = io.load_model(args.model)
    img = imageio.read_png(args.input)
    H, W = img.shape[1:]
    padded = _pad_to(img, 2 ** state.net.depth)
    pred, inter, cache = model.forward(state, padded.astype(np.float32), return_cache=True)
    imageio.write_png(args.output, pred[:, :H, :W])
    if args.dump_dir:
        _dump(args.dump_dir, inter, (H, W))
    if args.dump_taps:
        try:
            x, y = (int(v) for v in args.dump_taps.split(","))
        except ValueError:
            raise UsageError(f"--dump-taps expects X,Y integers, got {args.dump_taps!r}") from None
        if not (0 <= x < W and 0 <= y < H):
            raise UsageError(f"--dump-taps pixel ({x}, {y}) outside {W}x{H} image")
        if cache["scf"] is None:
            out.write("taps: filter disabled in this model\n")
        else:
            for line in _tap_lines(cache["scf"], x, y):
                out.write(line + "\n")
    out.write(f"output={args.output}\n")
    return EXIT_OK


def _image_list(path):
    p = Path(path)
    if p.is_dir():
        return {f.name: f for f in sorted(p.iterdir()) if f.suffix.lower() == ".png"}
    if not p.exists():
        raise FileNotFoundError(f"no such file or directory: {path}")
    return {p.name: p}


def cmd_eval(args, out):
    preds, gts = _image_list(args.pred), _image_list(args.gt)
    if len(preds) == 1 and len(gts) == 1:
        pairs = [(next(iter(preds)), next(iter(preds.values())), next(iter(gts.values())))]
    else:
        missing = sorted(set(preds) - set(gts))
        if missing:
            raise InputError(f"no ground truth for {', '.join(missing)}")
        pairs = [(name, preds[name], gts[name]) for name in preds]
    if not pairs:
        raise InputError(f"no PNG images under {args.pred}")
    report = MetricReport()
    for name, pp, gp in pairs:
        a, b = imageio.read_png(pp), imageio.read_png(gp)
        if a.shape != b.shape:
            raise InputError(f"{name}: size {a.shape[1:]} vs ground truth {b.shape[1:]}")
        report.add(name, a, b)
    for line in report.lines():
        out.write(line + "\n")
    return EXIT_OK


def cmd_ablate(args, out):
    seeds = seed_streams(args.seed)
    net, coupling = _net_from(args)
    cfg = _train_cfg_from(args, seeds["train"])
    kinds = {"coupling", "component", "kernel"} if args.kind == "all" else set(args.kind.split(","))
    unknown = kinds - {"coupling", "component", "kernel"}
    if unknown:
        raise UsageError(f"unknown ablation kind(s): {', '.join(sorted(unknown))}")
    variants = []
    if "coupling" in kinds:
        variants += train.coupling_variants(net)
    if "component" in kinds:
        variants += train.component_variants(net, coupling)
    if "kernel" in kinds:
        variants += train.kernel_size_variants(net, coupling)
    pairs = blur.load_pairs(args.data)
    rows = train.ablate(variants, pairs, cfg, model_seed=seeds["init"])
    lines = [r.line() for r in rows]
    if "coupling" in kinds:
        lines.append(train.ranking_note(rows))
    for line in lines:
        out.write(line + "\n")
    if args.out:
        Path(args.out).write_text("".join(line + "\n" for line in lines))
    return EXIT_OK


def cmd_gradcheck(args, out):
    rng = np.random.default_rng(seed_streams(args.seed)["data"])
    ok = True
    for op, inputs, wrt in selftest.gradcheck_cases(rng, args.instances):
        rep = tensor.gradcheck(op, inputs, tolerance=args.tolerance, wrt=wrt)
        ok &= rep.passed
        out.write(str(rep) + "\n")
    if not args.skip_model:
        net = model.NetworkConfig(base_channels=2, depth=1, kernel_size=3)
        state = train.randomize_params(model.build_model(net, seed=0, dtype=np.float64),
                                       seed=seed_streams(args.seed)["init"])
        rep = train.gradcheck_model(state, rng.uniform(size=(3, 8, 8)), rng.uniform(size=(3, 8, 8)),
                                    args.model_tolerance)
        ok &= rep.passed
        out.write(f"{'PASS' if rep.passed else 'FAIL'} {rep.op}: worst rel.err {rep.max_error:.2e} "
                  f"over {len(rep.errors)} tensors tol={rep.tolerance:g}\n")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_selftest(args, out):
    names = set(args.only.split(",")) if args.only else None
    known = {n for n, _ in selftest.CHECKS}
    if names and names - known:
        raise UsageError(f"unknown check(s): {', '.join(sorted(names - known))}")
    ok = True
    for res in selftest.run_all(names):
        ok &= res.passed
        out.write(res.line() + "\n")
        out.flush()
    out.write(f"selftest {'passed' if ok else 'FAILED'}\n")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "apply": cmd_apply, "eval": cmd_eval,
    "ablate": cmd_ablate, "gradcheck": cmd_gradcheck, "selftest": cmd_selftest,
}


def run(argv=None, out=None):
    """Run one command and return its exit code (never raises)."""
    out = out or sys.stdout
    parser, cmds = build_parser()
    try:
        args = _apply_config(parser, cmds, argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    except (OSError, ConfigurationError) as exc:
        print(f"miscfilter: error: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc, OSError) else EXIT_USAGE
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("miscfilter: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"miscfilter: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"miscfilter: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, InputError, FormatError) as exc:
        print(f"miscfilter: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

"""Command-line surface: cost, gradcheck, synth, train, eval, infer, bench.

Exit codes: 0 success, 2 usage error (argparse), 3 validation error,
4 runtime divergence.  Every subcommand accepts --seed, --config FILE,
--set key=value overrides, --threads (env DLKA_THREADS as fallback), and
--deterministic, which forces a single compute thread.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys
import time

import numpy as np

from . import checks
from .config import (
    config_dump,
    config_parse,
    net_config_from,
    synth_dims,
    train_settings_from,
)
from .costmodel import CostQuery, cost_table, flops, optimal_dilation
from .fileio import checkpoint_load, checkpoint_save, read_raster, write_raster
from .network import build_net
from .tensor import Tensor, ValidationError
from .training import (
    DivergenceError,
    EpochLog,
    OptimState,
    Sample,
    evaluate,
    split_train_val,
    synth_generate,
    train_loop,
)

MOMENTUM_PREFIX = "optim.momentum."


def _int_list(text: str) -> list[int]:
    try:
        return [int(part.strip(), 10) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ValidationError(f"expected comma-separated integers, got {text!r}")


def _load_values(args) -> dict[str, object]:
    text = ""
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            text = f.read()
    # overrides are just extra dotted-key lines appended after the file body
    for item in args.set or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        text += "\n" + item
    values = config_parse(text)
    if args.seed is not None:
        values["train.seed"] = args.seed
    return values


def _emit(lines, path) -> None:
    body = "\n".join(lines) + "\n"
    if path:
        with open(path, "w", encoding="utf-8") as f:
            f.write(body)
    else:
        sys.stdout.write(body)


# -- cost ---------------------------------------------------------------------------


def _cmd_cost(args) -> int:
    channels = _int_list(args.channels)
    kernels = _int_list(args.offset_kernels)
    if len(kernels) != 2:
        raise ValidationError("--offset-kernels expects exactly two kernel sizes")
    report = cost_table(channels, K=args.K, d=args.d, deform_kernels=tuple(kernels),
                        rank=args.rank, bias_mode=args.bias_mode)
    spatial = tuple(_int_list(args.spatial)) if args.spatial else ()
    header = ["C", "standard", "decomposed", "deform_decomposed",
              f"offset_dw_k{kernels[0]}", f"offset_dwd_k{kernels[1]}"]
    if spatial:
        header.append("flops_decomposed")
    rows = []
    for row in report.rows:
        cells = [row.C, row.std, row.decomposed, row.deform_decomposed,
                 row.offset_dw, row.offset_dwd]
        if spatial:
            q = CostQuery(rank=args.rank, C=row.C, K=args.K, d=args.d,
                          spatial=spatial, bias_mode=args.bias_mode,
                          deform_kernels=tuple(kernels))
            cells.append(flops(q))
        rows.append([str(c) for c in cells])
    if args.format == "csv":
        lines = [",".join(header)] + [",".join(r) for r in rows]
    else:
        widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
                  for i, h in enumerate(header)]
        lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
        lines += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
        d_star, d_int = optimal_dilation(args.K)
        lines.append(f"optimal dilation for K={args.K}: d*={d_star:.6f}, "
                     f"integer minimum d={d_int}")
    _emit(lines, args.out)
    return 0


# -- gradcheck ----------------------------------------------------------------------


def _cmd_gradcheck(args) -> int:
    names = [n.strip() for n in args.ops.split(",")] if args.ops else None
    seeds = [args.seed + i if args.seed is not None else i
             for i in range(args.seeds)]
    lines = ["op,seed,max_rel_err,passed"]
    all_ok = True
    for name, seed, report in checks.run_suite(names, seeds, h=args.h,
                                               threshold=args.threshold):
        all_ok &= report.passed
        lines.append(f"{name},{seed},{report.max_rel_err:.3e},{report.passed}")
    _emit(lines, args.out)
    return 0 if all_ok else 3


# -- synth --------------------------------------------------------------------------


def _samples_from_values(values) -> list[Sample]:
    return synth_generate(values["net.rank"], values["synth.n"], synth_dims(values),
                          values["net.num_classes"], values["train.seed"],
                          noise_sigma=values["synth.noise_sigma"])


def _cmd_synth(args) -> int:
    values = _load_values(args)
    samples = _samples_from_values(values)
    os.makedirs(args.out, exist_ok=True)
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.label[None] for s in samples]).astype(np.uint8)
    write_raster(os.path.join(args.out, "images.dlkv"), images)
    write_raster(os.path.join(args.out, "labels.dlkv"), labels)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _samples_from_dir(path) -> list[Sample]:
    images = read_raster(os.path.join(path, "images.dlkv")).astype(np.float64)
    labels = read_raster(os.path.join(path, "labels.dlkv")).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise ValidationError("images and labels disagree on sample count")
    return [Sample(image=images[i], label=labels[i, 0], seed=i)
            for i in range(images.shape[0])]


# -- train / eval / infer -------------------------------------------------------------


def _checkpoint_tensors(net, optim):
    out = [(name, p.data) for name, p in net.named_parameters()]
    out += [(MOMENTUM_PREFIX + name, buf) for name, buf in optim.buffers.items()]
    return out


def _restore(path):
    """Load a checkpoint into (values, net, optim-buffer map, start_epoch)."""
    config_text, tensors = checkpoint_load(path)
    values = config_parse(config_text)
    cfg = net_config_from(values)
    net = build_net(cfg, values["train.seed"])
    params = {k: v for k, v in tensors.items() if not k.startswith(MOMENTUM_PREFIX)}
    buffers = {k[len(MOMENTUM_PREFIX):]: v for k, v in tensors.items()
               if k.startswith(MOMENTUM_PREFIX)}
    net.load_state(params)
    return values, cfg, net, buffers, values["resume.epoch"]


def _csv_header(num_classes: int) -> str:
    cols = ["epoch", "loss", "dice_mean"]
    cols += [f"dice_c{c}" for c in range(1, num_classes)]
    cols.append("hd95_mean")
    return ",".join(cols)


def _csv_row(log) -> str:
    cells = [str(log.epoch), f"{log.loss:.17g}", f"{log.dice_mean:.17g}"]
    cells += [f"{v:.17g}" for v in log.dice_per_class]
    cells.append("nan" if math.isnan(log.hd95_mean) else f"{log.hd95_mean:.17g}")
    return ",".join(cells)


def _cmd_train(args) -> int:
    net = optim = None
    start_epoch = 0
    if args.resume:
        values, cfg, net, buffers, start_epoch = _restore(args.resume)
        if args.seed is not None:
            raise ValidationError("--seed cannot change on resume; it is stored "
                                  "in the checkpoint")
        for item in args.set or []:
            raise ValidationError(f"--set cannot change on resume: {item!r}")
        settings = train_settings_from(values)
        if args.epochs is not None:
            settings = dataclasses.replace(settings, epochs=args.epochs)
        resolved = settings.resolved(cfg.rank)
        optim = OptimState(lr=resolved.lr, momentum=resolved.momentum,
                           weight_decay=resolved.weight_decay, buffers=buffers)
    else:
        values = _load_values(args)
        if args.epochs is not None:
            values["train.epochs"] = args.epochs
        cfg = net_config_from(values)
        settings = train_settings_from(values)
    samples = (_samples_from_dir(args.data) if args.data
               else _samples_from_values(values))
    lines = [_csv_header(cfg.num_classes)]
    live = sys.stdout if args.log else None

    def progress(log):
        row = _csv_row(log)
        lines.append(row)
        if live is not None:
            print(row, file=live, flush=True)

    if live is not None:
        print(lines[0], file=live, flush=True)
    net, optim, logs = train_loop(cfg, samples, settings, net=net, optim=optim,
                                  start_epoch=start_epoch,
                                  with_hd95=not args.no_hd95, progress=progress)
    values["train.epochs"] = settings.epochs
    values["resume.epoch"] = start_epoch + len(logs)
    checkpoint_save(args.out, _checkpoint_tensors(net, optim), config_dump(values))
    _emit(lines, args.log)
    return 0


def _cmd_eval(args) -> int:
    values, cfg, net, _, epoch = _restore(args.ckpt)
    if args.data:
        samples = _samples_from_dir(args.data)
        idx = np.arange(len(samples))
    else:
        samples = _samples_from_values(values)
        _, idx = split_train_val(len(samples), values["train.seed"])
    dice_mean, per_class, hd_mean = evaluate(net, samples, idx, cfg.num_classes,
                                             with_hd95=not args.no_hd95)
    lines = [_csv_header(cfg.num_classes),
             _csv_row(EpochLog(epoch, math.nan, dice_mean, per_class, hd_mean))]
    _emit(lines, args.out)
    return 0


def _cmd_infer(args) -> int:
    values, cfg, net, _, _ = _restore(args.ckpt)
    images = read_raster(args.input).astype(np.float64)
    if images.ndim - 2 != cfg.rank:
        raise ValidationError(
            f"input raster rank {images.ndim - 2} does not match model rank "
            f"{cfg.rank}")
    out = []
    for i in range(images.shape[0]):
        logits = net(Tensor(images[i: i + 1])).data
        out.append(np.argmax(logits, axis=1).astype(np.uint8))
    labels = np.concatenate(out)[:, None]
    write_raster(args.output, labels)
    print(f"wrote labels {labels.shape} to {args.output}")
    return 0


# -- bench --------------------------------------------------------------------------


def _cmd_bench(args) -> int:
    values = _load_values(args)
    dims = synth_dims(values)
    rng = np.random.default_rng([values["train.seed"], 7])
    lines = ["batch_size,mode,reps,mean_ms_per_image,median_ms_per_image,"
             "p95_ms_per_image,params"]
    for mode in ("deformable", "rigid"):
        base = net_config_from(values)
        cfg = dataclasses.replace(base, deformable=(mode == "deformable"))
        net = build_net(cfg, values["train.seed"])
        n_params = sum(p.size for _, p in net.named_parameters())
        for batch in _int_list(args.batch_sizes):
            if args.reps <= 0:
                continue
            x = Tensor(rng.standard_normal((batch, cfg.in_channels, *dims)))
            for _ in range(args.warmup):
                net(x)
            times = np.empty(args.reps)
            for r in range(args.reps):
                t0 = time.perf_counter()
                net(x)
                times[r] = time.perf_counter() - t0
            per_image = times * 1e3 / batch
            lines.append(
                f"{batch},{mode},{args.reps},{per_image.mean():.4f},"
                f"{np.median(per_image):.4f},{np.percentile(per_image, 95):.4f},"
                f"{n_params}")
    _emit(lines, args.out)
    return 0


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dlka",
                                     description="deformable large-kernel "
                                                 "attention segmentation toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (key = value with [sections])")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, default=None,
                        help="override train.seed")
    common.add_argument("--deterministic", action="store_true",
                        help="force single-threaded compute")
    common.add_argument("--threads", type=int, default=None,
                        help="compute thread cap (default: env DLKA_THREADS)")
    common.add_argument("--out", default=None, help="output path")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cost", parents=[common],
                       help="closed-form parameter/FLOP table")
    p.add_argument("--rank", type=int, choices=(2, 3), default=2)
    p.add_argument("--channels", default="32,64,128,256,512")
    p.add_argument("-K", "--K", dest="K", type=int, default=21)
    p.add_argument("-d", "--dilation", dest="d", type=int, default=3)
    p.add_argument("--bias-mode", choices=("table", "eq3"), default="table")
    p.add_argument("--spatial", default="",
                   help="comma extents; adds a FLOPs column")
    p.add_argument("--offset-kernels", default="5,7")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(fn=_cmd_cost)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference gradient report")
    p.add_argument("--ops", default=None,
                   help=f"comma-separated cases (default all: "
                        f"{','.join(checks.CASES)})")
    p.add_argument("--seeds", type=int, default=1, help="seeds per case")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("synth", parents=[common],
                       help="write a synthetic dataset as DLKV rasters")
    p.set_defaults(fn=_cmd_synth, out_required=True)

    p = sub.add_parser("train", parents=[common], help="train and checkpoint")
    p.add_argument("--data", default=None,
                   help="dataset dir from `synth` (default: generate in memory)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--epochs", type=int, default=None,
                   help="epoch count override (additional epochs when resuming)")
    p.add_argument("--log", default=None, help="metric CSV path (default stdout)")
    p.add_argument("--no-hd95", action="store_true",
                   help="skip HD95 during validation (writes nan)")
    p.set_defaults(fn=_cmd_train, out_required=True)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--no-hd95", action="store_true")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("infer", parents=[common],
                       help="raster in, argmax label raster out")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=_cmd_infer)

    p = sub.add_parser("bench", parents=[common], help="forward-pass timing CSV")
    p.add_argument("--batch-sizes", default="1")
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=50)
    p.set_defaults(fn=_cmd_bench)
    return parser


def _thread_limit(args) -> int | None:
    if args.deterministic:
        return 1
    if args.threads is not None:
        return args.threads
    env = os.environ.get("DLKA_THREADS")
    return int(env) if env else None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "out_required", False) and not args.out:
        print("error: --out is required for this command", file=sys.stderr)
        return 2
    try:
        limit = _thread_limit(args)
        if limit is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=limit):
                return args.fn(args)
        return args.fn(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: train, infer, count, gradcheck, bench, generate.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

VARIANT_ALIASES = {"t": "tiny", "s": "small", "b": "base", "tiny": "tiny", "small": "small", "base": "base"}

# config-file keys accepted per subcommand, mapped to argparse destinations
TRAIN_KEYS = {
    "data": "data", "variant": "variant", "epochs": "epochs", "batch_size": "batch_size",
    "lr_init": "lr", "lr": "lr", "lr_min": "lr_min", "weight_decay": "weight_decay",
    "alpha": "alpha", "beta": "beta", "class_count": "classes", "classes": "classes",
    "resolution": "resolution", "seed": "seed", "checkpoint_dir": "out", "out": "out",
    "augment": "augment", "grad_clip": "grad_clip", "dtype": "dtype",
}
GENERATE_KEYS = {
    "count": "count", "resolution": "resolution", "class_count": "classes", "classes": "classes",
    "noise": "noise", "seed": "seed", "shapes": "shapes", "channels": "channels", "out": "out",
    "max_shapes": "max_shapes",
}


class UsageError(Exception):
    pass


def parse_config_file(path: "str | Path", allowed: dict[str, str]) -> dict[str, str]:
    """Flat ``key = value`` lines with ``#`` comments; unknown keys are rejected by name."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    out = {}
    for n, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise UsageError(f"{p}:{n}: expected 'key = value', got {raw!r}")
        if key not in allowed:
            raise UsageError(f"{p}:{n}: unknown config key {key!r}")
        out[allowed[key]] = value
    return out


def _variant(text: str) -> str:
    try:
        return VARIANT_ALIASES[text.lower()]
    except KeyError:
        raise argparse.ArgumentTypeError(f"invalid variant {text!r} (choose t, s, b)") from None


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _merge(args: argparse.Namespace, parser: argparse.ArgumentParser, allowed: dict[str, str], defaults: dict):
    """Fill unset flags from the config file, then from defaults; flags win."""
    file_vals = parse_config_file(args.config, allowed) if getattr(args, "config", None) else {}
    types = {a.dest: a.type for a in parser._actions}
    for dest, default in defaults.items():
        if getattr(args, dest, None) is not None:
            continue
        if dest in file_vals:
            raw = file_vals[dest]
            conv = types.get(dest) or (lambda v: v)
            try:
                value = _bool(raw) if isinstance(default, bool) else conv(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config value for {dest!r}: {exc}") from None
            setattr(args, dest, value)
        else:
            setattr(args, dest, default)


@contextlib.contextmanager
def thread_limit():
    """Apply RWKV_UNET_THREADS (0 or unset = library default) to BLAS/OpenMP pools."""
    raw = os.environ.get("RWKV_UNET_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"RWKV_UNET_THREADS must be an integer, got {raw!r}") from None
    if n <= 0:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


# -- subcommands ------------------------------------------------------------------------


TRAIN_DEFAULTS = dict(
    data=None, variant="tiny", epochs=200, batch_size=4, lr=1e-3, lr_min=0.0, weight_decay=0.01,
    alpha=0.5, beta=0.5, classes=None, resolution=None, seed=0, out="runs/train", augment=False,
    grad_clip=None, dtype="float32",
)


def cmd_train(args, parser) -> int:
    from .data import DatasetManifest, load_dataset
    from .losses import LossConfig
    from .train import TrainConfig, train

    _merge(args, parser, TRAIN_KEYS, TRAIN_DEFAULTS)
    if args.data is None:
        raise UsageError("--data is required (directory with manifest.tsv, or a manifest file)")
    if not Path(args.data).exists():
        raise UsageError(f"data path does not exist: {args.data}")
    manifest = DatasetManifest.read(args.data)
    if args.classes is None:
        from .data import read_mask

        args.classes = int(max(read_mask(m).max() for _, m in manifest.records)) + 1
    if args.resolution is None:
        from .data import read_image

        args.resolution = read_image(manifest.records[0][0]).shape[1]
    data = load_dataset(manifest, args.resolution, args.classes)
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr_init=args.lr, lr_min=args.lr_min,
        weight_decay=args.weight_decay, seed=args.seed,
        loss=LossConfig(args.alpha, args.beta, args.classes), variant=args.variant,
        checkpoint_dir=args.out, augment=args.augment, grad_clip=args.grad_clip, dtype=args.dtype,
    )
    result = train(cfg, data, resume=args.resume)
    print(f"final_train_dsc={result.final_dsc:.4f} best_dsc={result.best_dsc:.4f} out={args.out}")
    return EXIT_OK


def _infer_inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".pgm", ".ppm"))
        if not files:
            raise UsageError(f"no images in {path}")
        return files
    if not path.exists():
        raise UsageError(f"input not found: {path}")
    return [path]


def cmd_infer(args, parser) -> int:
    from .checkpoint import load_checkpoint, write_tensors
    from .data import read_image, write_mask
    from .losses import predict_labels
    from .model import forward
    from .nn import resize_bilinear_array, resize_nearest_array
    from .tensor import Tensor, no_grad

    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    if args.classes is not None and args.classes != model.num_classes:
        raise UsageError(f"--classes {args.classes} but the checkpoint predicts {model.num_classes}")
    inputs = _infer_inputs(Path(args.input))
    out = Path(args.output)
    multi = len(inputs) > 1 or Path(args.input).is_dir()
    if multi:
        out.mkdir(parents=True, exist_ok=True)
    dumps = {}
    for src in inputs:
        image = read_image(src)
        h, w = image.shape[1:]
        if image.shape[0] != model.in_channels:
            raise ValueError(f"{src}: image has {image.shape[0]} channels, model expects {model.in_channels}")
        if args.resize:
            image = resize_bilinear_array(image, args.resize, args.resize)
        elif h % model.stride or w % model.stride:
            raise ValueError(
                f"{src}: extents {h}x{w} are not multiples of {model.stride}; pass --resize N to resample"
            )
        with no_grad():
            logits = forward(model, Tensor(image[None].astype(model.head.weight.dtype))).data
        labels = predict_labels(logits)[0]
        if labels.shape != (h, w):
            labels = resize_nearest_array(labels, h, w)
        dest = out / f"{src.stem}.png" if multi else out
        write_mask(dest, labels)
        dumps[src.stem] = logits[0]
    if args.logits:
        write_tensors(args.logits, dumps)
    print(f"wrote {len(inputs)} mask(s) to {out}")
    return EXIT_OK


def cmd_count(args, parser) -> int:
    from .analysis import count, format_csv, format_kv, format_table

    report = count(args.variant, args.in_channels, args.res, args.classes)
    if args.csv:
        print(format_csv(report, args.flops_x2), end="")
    elif args.kv:
        print(format_kv(report, args.flops_x2))
    else:
        print(format_table(report, args.depth, args.flops_x2))
    return EXIT_OK


def cmd_gradcheck(args, parser) -> int:
    from .checks import TOLERANCE, run_gradient_suite

    results = run_gradient_suite(args.seed, None if args.full else args.max_coords)
    width = max(map(len, results))
    ok = True
    for name, err in results.items():
        passed = err < TOLERANCE
        ok &= passed
        print(f"{name:<{width}}  rel_err={err:.3e}  {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_bench(args, parser) -> int:
    from .bench import fit_linear, resolution_bench, wkv_timing

    rows = resolution_bench(args.variant, args.res, args.in_channels, args.classes, args.repeats, args.seed)
    base = rows[0][1]
    print(f"{'res':>6} {'MACs':>16} {'ratio':>8} {'seconds':>9}")
    for r, macs, sec in rows:
        print(f"{r:>6} {macs:>16} {macs / base:>8.3f} {sec:>9.3f}")
    if args.wkv:
        timing = wkv_timing(args.wkv, repeats=args.repeats)
        fit = fit_linear(*zip(*timing))
        for t, sec in timing:
            print(f"wkv T={t} seconds={sec:.5f}")
        print(f"wkv_linear_fit slope={fit.slope:.3e} r2={fit.r2:.5f}")
    return EXIT_OK


GENERATE_DEFAULTS = dict(count=8, resolution=128, classes=3, noise=0.05, seed=0, shapes="disk,rect,annulus",
                         channels=1, out=None, max_shapes=3)


def cmd_generate(args, parser) -> int:
    from .data import SyntheticSpec, generate_synthetic

    _merge(args, parser, GENERATE_KEYS, GENERATE_DEFAULTS)
    if args.out is None:
        raise UsageError("--out is required")
    try:
        spec = SyntheticSpec(
            count=args.count, resolution=args.resolution, shapes=tuple(s.strip() for s in args.shapes.split(",")),
            class_count=args.classes, noise=args.noise, seed=args.seed, channels=args.channels,
            max_shapes=args.max_shapes,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = generate_synthetic(spec, args.out)
    print(f"wrote {len(manifest)} samples to {args.out}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rwkv-unet", description="RWKV-UNet segmentation toolkit (numpy).")
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch lines to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a manifest of image/mask pairs")
    p.add_argument("--config", help="key = value file; flags override its entries")
    p.add_argument("--data", help="dataset directory (with manifest.tsv) or manifest file")
    p.add_argument("--variant", type=_variant, help="t, s or b (default t)")
    p.add_argument("--epochs", type=int, help="number of epochs (default 200)")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="batch size (default 4)")
    p.add_argument("--lr", type=float, help="initial learning rate (default 1e-3)")
    p.add_argument("--lr-min", dest="lr_min", type=float, help="final cosine learning rate (default 0)")
    p.add_argument("--weight-decay", dest="weight_decay", type=float, help="AdamW decay (default 0.01)")
    p.add_argument("--alpha", type=float, help="cross-entropy weight (default 0.5)")
    p.add_argument("--beta", type=float, help="Dice weight (default 0.5)")
    p.add_argument("--classes", type=int, help="class count; 1 = binary sigmoid head (default: from masks)")
    p.add_argument("--resolution", type=int, help="network input size (default: first image size)")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--out", help="checkpoint/log directory (default runs/train)")
    p.add_argument("--augment", action="store_const", const=True, help="random flips and quarter turns")
    p.add_argument("--grad-clip", dest="grad_clip", type=float, help="global gradient-norm clip")
    p.add_argument("--dtype", choices=("float32", "float64"), help="parameter precision (default float32)")
    p.add_argument("--resume", help="continue from a last.ckpt written by an earlier run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict label masks with a trained checkpoint")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="checkpoint written by train")
    src.add_argument("--pretrained", dest="checkpoint", help="alias of --checkpoint (this package's own files only)")
    p.add_argument("--input", required=True, help="image file or directory of images")
    p.add_argument("--output", required=True, help="mask PNG path, or directory for several inputs")
    p.add_argument("--classes", type=int, help="expected class count (checked against the checkpoint)")
    p.add_argument("--resize", type=int, help="resample inputs to NxN before inference")
    p.add_argument("--logits", help="also dump raw logits to this file in checkpoint format")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("count", help="parameter and MAC report")
    p.add_argument("--variant", type=_variant, default="base", help="t, s or b (default b)")
    p.add_argument("--res", type=int, default=224, help="square input resolution (default 224)")
    p.add_argument("--in-channels", dest="in_channels", type=int, default=3, help="input channels (default 3)")
    p.add_argument("--classes", type=int, default=9, help="output classes (default 9)")
    p.add_argument("--depth", type=int, default=2, help="tree depth of the text table (default 2)")
    p.add_argument("--csv", action="store_true", help="one CSV row per component")
    p.add_argument("--kv", action="store_true", help="machine-readable key=value totals")
    p.add_argument("--flops-x2", dest="flops_x2", action="store_true", help="report 2*MACs as FLOPs")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every block (float64)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--max-coords", dest="max_coords", type=int, default=24, help="coordinates probed per tensor")
    p.add_argument("--full", action="store_true", help="probe every coordinate")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="MACs and wall-clock versus resolution (and WKV length)")
    p.add_argument("--res", type=int, nargs="+", default=[128, 256, 512], help="resolutions (default 128 256 512)")
    p.add_argument("--variant", type=_variant, default="tiny", help="t, s or b (default t)")
    p.add_argument("--in-channels", dest="in_channels", type=int, default=3, help="input channels (default 3)")
    p.add_argument("--classes", type=int, default=9, help="output classes (default 9)")
    p.add_argument("--repeats", type=int, default=1, help="timing repeats, best kept (default 1)")
    p.add_argument("--wkv", type=int, nargs="*", help="also time the WKV kernel at these sequence lengths")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("generate", help="write a synthetic shapes dataset")
    p.add_argument("--config", help="key = value file; flags override its entries")
    p.add_argument("--out", help="output directory")
    p.add_argument("--count", type=int, help="number of samples (default 8)")
    p.add_argument("--resolution", type=int, help="square size, multiple of 32 (default 128)")
    p.add_argument("--classes", type=int, help="class count incl. background; 1 = binary (default 3)")
    p.add_argument("--noise", type=float, help="Gaussian noise std (default 0.05)")
    p.add_argument("--shapes", help="comma list from disk,rect,annulus (default all)")
    p.add_argument("--channels", type=int, help="1 or 3 (default 1)")
    p.add_argument("--max-shapes", dest="max_shapes", type=int, help="shapes per image at most (default 3)")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.set_defaults(func=cmd_generate)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        with thread_limit():
            return args.func(args, sub)
    except UsageError as exc:
        sub.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure: report, do not dump a traceback
        if os.environ.get("RWKV_UNET_DEBUG"):
            raise
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

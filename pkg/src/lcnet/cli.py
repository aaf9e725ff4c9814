"""Command-line interface: ``lcnet <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data/file error, 3 check failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

from . import autodiff, ops
from .analysis import millions, summarize
from .arch import NUM_BLOCKS, LCNetConfig, build_model, run_layers
from .bench import KERNEL_ABLATION_MASKS, SE_ABLATION_MASKS, ablate, benchmark, format_ablation
from .errors import ConfigError, CorruptFileError, ShapeMismatchError
from .preprocess import preprocess, read_ppm
from .train import OptState, ScheduleCfg, SynthDataset, history_csv, train_toy
from .weights import assign_weights, load_tensor, load_weights, save_tensor, save_weights

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _mask(text: str) -> str:
    if len(text) != NUM_BLOCKS or set(text) - {"0", "1"}:
        raise argparse.ArgumentTypeError(f"must be {NUM_BLOCKS} characters of 0/1, got {text!r}")
    return text


def _mask_list(text: str) -> list[str]:
    return [_mask(m.strip()) for m in text.split(",") if m.strip()]


def _hw(text: str) -> tuple[int, int]:
    try:
        parts = [int(p) for p in text.lower().split("x")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected H or HxW, got {text!r}") from None
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"expected H or HxW, got {text!r}")
    return parts[0], parts[1]


def _model_flags(defaults: dict) -> _Parser:
    p = _Parser(add_help=False)
    g = p.add_argument_group("model")
    g.add_argument("--config", help="config file of 'key = value' lines; explicit flags override it")
    g.add_argument("--scale", type=float, help=f"width multiplier (default {defaults['scale']})")
    g.add_argument("--se-mask", type=_mask, help="13-character 0/1 mask of blocks with SE")
    g.add_argument("--kernel-mask", type=_mask, help="13-character 0/1 mask of blocks using 5x5 depthwise kernels")
    g.add_argument("--classes", type=int, help=f"number of classes (default {defaults['classes']})")
    return p


def _common_flags() -> _Parser:
    p = _Parser(add_help=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--output", choices=("text", "csv"), default="text")
    return p


def build_config(args, scale: float = 1.0, classes: int = 1000) -> LCNetConfig:
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            config = LCNetConfig.from_text(f.read())
    else:
        config = LCNetConfig(scale=scale, num_classes=classes)
    overrides = {
        "scale": args.scale,
        "se_mask": args.se_mask,
        "kernel_mask": args.kernel_mask,
        "num_classes": args.classes,
    }
    return replace(config, **{k: v for k, v in overrides.items() if v is not None})


def cmd_analyze(args) -> int:
    report = summarize(build_config(args), args.input_hw)
    if args.output == "csv":
        sys.stdout.write(report.to_csv())
    else:
        sys.stdout.write(report.to_text())
    return EXIT_OK


def _load_input(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        is_ppm = f.read(2) == b"P6"
    if is_ppm:
        return preprocess(read_ppm(path))
    return load_tensor(path)


def cmd_infer(args) -> int:
    config = build_config(args)
    model = build_model(config, args.seed)
    if args.weights:
        assign_weights(model, load_weights(args.weights))
    x = np.ascontiguousarray(_load_input(args.input), dtype=np.float32)
    if x.ndim != 4:
        raise ShapeMismatchError(f"input tensor must be [N, 3, H, W], got {x.shape}")
    logits = run_layers(model, x, "infer", workers=args.workers)
    if args.logits_out:
        save_tensor(args.logits_out, logits)
    probs = ops.softmax(logits)
    k = min(args.top_k, probs.shape[1])
    lines = ["sample,index,probability"] if args.output == "csv" else []
    for n, row in enumerate(probs):
        order = np.argsort(-row, kind="stable")[:k]
        if args.output == "csv":
            lines += [f"{n},{i},{row[i]:.9g}" for i in order]
        else:
            if len(probs) > 1:
                lines.append(f"# sample {n}")
            lines += [f"{i}\t{row[i]:.9g}" for i in order]
    print("\n".join(lines))
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.iters < 10:
        raise UsageError("iters must be ≥ 10")
    result = benchmark(
        build_config(args), workers=args.workers, warmup=args.warmup, iters=args.iters,
        batch=args.batch, input_hw=args.input_hw, seed=args.seed,
    )
    if args.output == "csv":
        print("config,workers,batch,warmup,iters,median_ms,mean_ms,p90_ms")
        print(f"\"{result.config}\",{result.workers},{result.batch},{result.warmup},{result.iters},"
              f"{result.median_ms:.4f},{result.mean_ms:.4f},{result.p90_ms:.4f}")
    else:
        sys.stdout.write(result.summary())
    return EXIT_OK


def cmd_ablate(args) -> int:
    masks = args.masks
    if masks is None:
        masks = SE_ABLATION_MASKS if args.mode == "se" else KERNEL_ABLATION_MASKS
    if not masks:
        raise UsageError("--masks: mask list is empty")
    if args.iters < 10:
        raise UsageError("iters must be ≥ 10")
    base = build_config(args, scale=0.5)
    rows = ablate(args.mode, masks, base=base, iters=args.iters, warmup=args.warmup,
                  workers=args.workers, input_hw=args.input_hw)
    sys.stdout.write(format_ablation(rows, csv=args.output == "csv"))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = autodiff.grad_check_report(seed=args.seed)
    ok = report.max_rel_error < GRADCHECK_TOL
    if args.output == "csv":
        print("kind,max_rel_error")
        for kind, err in sorted(report.worst_by_kind.items()):
            print(f"{kind},{err:.6e}")
        print(f"all,{report.max_rel_error:.6e}")
    else:
        for kind, err in sorted(report.worst_by_kind.items()):
            print(f"{kind:<16} {err:.3e}")
        print(f"checked {report.checked} samples ({report.resampled} resampled near kinks)")
        print(f"worst: {report.worst_param}")
        print(f"max relative error: {report.max_rel_error:.6e}  {'PASS' if ok else 'FAIL'} (tol {GRADCHECK_TOL:g})")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_train_toy(args) -> int:
    config = build_config(args, scale=0.25, classes=3)
    if args.epochs < 0:
        raise UsageError("--epochs must be >= 0")
    if args.batch_size < 2 or args.samples < args.batch_size:
        raise UsageError("--batch-size must be >= 2 and <= --samples")
    for path in (args.checkpoint, args.history):
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)
    if args.epochs == 0:
        model, history = build_model(config, args.seed), []
    else:
        data = SynthDataset(seed=args.seed, num_classes=config.num_classes, num_samples=args.samples,
                            hw=args.input_hw, noise=args.noise)
        schedule = ScheduleCfg(args.base_lr, min(args.warmup_epochs, args.epochs - 1), args.epochs,
                               args.samples // args.batch_size)
        opt = OptState(momentum=args.momentum, weight_decay=args.weight_decay)

        def report(s):
            if args.output == "text":
                print(f"epoch {s.epoch:3d}  loss {s.loss:.4f}  acc {s.accuracy:.3f}", flush=True)

        result = train_toy(config, data, schedule, opt, args.seed, batch_size=args.batch_size,
                           workers=args.workers, on_epoch=report)
        model, history = result.model, result.history
    save_weights(model, args.checkpoint)
    with open(args.history, "w", encoding="utf-8") as f:
        f.write(history_csv(history))
    if args.output == "csv":
        sys.stdout.write(history_csv(history))
    elif history:
        print(f"final loss {history[-1].loss:.4f}  final accuracy {history[-1].accuracy:.3f}")
    print(f"wrote {args.checkpoint} and {args.history}", file=sys.stderr)
    return EXIT_OK


def make_parser() -> _Parser:
    parser = _Parser(prog="lcnet", description="PP-LCNet CPU inference engine, cost analyzer and toy trainer.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _common_flags()
    full = _model_flags({"scale": 1.0, "classes": 1000})

    p = sub.add_parser("analyze", parents=[full, common], help="per-layer params/MACs report")
    p.add_argument("--input-hw", type=_hw, default=(224, 224), help="input size, H or HxW (default 224)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser(
        "infer", parents=[full, common], help="classify a .lct tensor or P6 PPM image",
        description="PPM images are resized (short edge 256, bilinear, half-pixel centres), "
                    "centre-cropped to 224x224, scaled to [0, 1] and normalised with the common "
                    "ImageNet mean (0.485, 0.456, 0.406) and std (0.229, 0.224, 0.225).",
    )
    p.add_argument("input", help=".lct tensor [N,3,H,W] or binary PPM image")
    p.add_argument("--weights", help=".lcnw weight file (default: fresh initialisation from --seed)")
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--logits-out", help="also write the logits as a .lct tensor")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", parents=[full, common], help="inference latency benchmark")
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--input-hw", type=_hw, default=(224, 224))
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", parents=[_model_flags({"scale": 0.5, "classes": 1000}), common],
                       help="cost/latency sweep over SE or kernel masks")
    p.add_argument("--mode", choices=("se", "kernel"), required=True)
    p.add_argument("--masks", type=_mask_list, help="comma-separated masks (default: the standard rows)")
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--input-hw", type=_hw, default=(224, 224))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the backward pass")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-toy", parents=[_model_flags({"scale": 0.25, "classes": 3}), common],
                       help="train on the synthetic blob dataset")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--warmup-epochs", type=int, default=1, help="clamped to epochs - 1")
    p.add_argument("--base-lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=3e-5)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--samples", type=int, default=384)
    p.add_argument("--input-hw", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--checkpoint", default="toy.lcnw")
    p.add_argument("--history", default="toy_history.csv")
    p.set_defaults(func=cmd_train_toy)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits on --help and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"lcnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorruptFileError, ShapeMismatchError, OSError) as exc:
        print(f"lcnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        print(f"lcnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

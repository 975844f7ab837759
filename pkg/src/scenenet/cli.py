"""``scenenet`` command line: describe, cost, filter, sweep, train, eval, gen-data.

Structured output (CSV) goes to stdout unless ``--out`` names a file;
``--pretty`` switches tables to aligned columns.  Exit status is 0 on
success, 2 on invalid input and 3 on a numeric failure during training.
"""

from __future__ import annotations

import argparse
import csv
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import arch, cost, data, freq
from .train import TrainConfig, check_compatible, evaluate, train
from .tensor import DimensionError, NumericError, ValidationError

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3

_PRESET = re.compile(r"^resnet(?P<depth>\d+)(?:x(?P<wf>[\d.]+))?(?P<dp>\+dp)?$")


def resolve_arch(text: str, classes: Optional[int] = None, input_size: Optional[int] = None,
                 stem: Optional[str] = None) -> arch.ArchSpec:
    """A config file path or a preset name: ``resnet50``, ``resnet50x0.5``, ``resnet18+dp``, ``dn``, ``dn+dp``."""
    path = Path(text)
    if path.is_file():
        spec = arch.load_config(path)
    else:
        name = text.strip().lower()
        if name in ("dn", "dn+dp"):
            spec = arch.ArchSpec(101, 0.5, 365, "dilated" if name == "dn+dp" else "strided")
        elif m := _PRESET.match(name):
            spec = arch.ArchSpec(int(m["depth"]), float(m["wf"] or 1.0),
                                 downsample="dilated" if m["dp"] else "strided")
        else:
            raise ValidationError(f"arch: {text!r} is neither a config file nor a preset")
    changes = {}
    if classes is not None:
        changes["num_classes"] = classes
    if input_size is not None:
        changes["input_size"] = (input_size, input_size)
    if stem is not None:
        changes["stem"] = stem
    return replace(spec, **changes) if changes else spec


def _emit(rows: list[Sequence], out, pretty: bool) -> None:
    if pretty:
        text = [[str(c) for c in r] for r in rows]
        widths = [max(len(r[i]) for r in text) for i in range(len(text[0]))]
        for r in text:
            out.write("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() + "\n")
    else:
        csv.writer(out, lineterminator="\n").writerows(rows)


def _open_out(path: Optional[str]):
    if path is None:
        return sys.stdout, False
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", newline=""), True


def _shape(shape) -> str:
    return "x".join(str(d) for d in shape)


def cmd_describe(args) -> int:
    spec = resolve_arch(args.arch, args.classes, args.input, args.stem)
    net = arch.build(spec, init=False)
    modules = dict(net.named_modules())
    main_path = set(arch.weighted_layers(net, include_projections=args.all))
    rows = [("layer", "type", "output_shape", "params")]
    for info in net.trace():
        if info.path not in modules or info.path == "":
            continue
        module = modules[info.path]
        if not args.all and info.path not in main_path:
            continue
        if args.all and not hasattr(module, "describe"):
            continue
        rows.append((info.path, module.describe(), _shape(info.out_shape), info.params))
    out, close = _open_out(args.out)
    _emit(rows, out, args.pretty)
    if close:
        out.close()
    return EXIT_OK


def cmd_cost(args) -> int:
    spec = resolve_arch(args.arch, args.classes, None, args.stem)
    net = arch.build(spec, init=False)
    size = args.input or spec.input_size
    rep = cost.report(net, size)
    print(rep.summary())
    if args.out:
        Path(args.out).write_text(rep.to_csv())
    return EXIT_OK


def _image_files(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if path.is_dir():
        return sorted(p for p in path.rglob("*") if p.suffix.lower() in data.IMAGE_SUFFIXES)
    raise ValidationError(f"data: {path} does not exist")


def cmd_filter(args) -> int:
    spec = freq.FilterSpec(args.kind, args.size)
    src, dst = Path(args.data), Path(args.out)
    files = _image_files(src)
    if not files:
        raise ValidationError(f"data: no images under {src}")
    for f in files:
        img = data.read_image(f).astype(np.float64)
        out = np.clip(freq.apply_filter(img[None], spec)[0], 0.0, 1.0)
        target = dst if src.is_file() else dst / f.relative_to(src)
        target.parent.mkdir(parents=True, exist_ok=True)
        data.write_image(target, out)
    if args.mask:
        side = data.read_image(files[0]).shape[-1]
        freq.save_mask_image(spec, side, args.mask)
    return EXIT_OK


def _parse_sizes(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ValidationError(f"sizes: expected comma-separated integers, got {text!r}") from None


def _load_eval_data(args, net) -> data.Dataset:
    ds = data.load_image_folder(args.data, args.classes_subset, args.seed, args.strict)
    check_compatible(net, ds)
    return ds


def cmd_sweep(args) -> int:
    net, _ = arch.load_checkpoint(args.ckpt)
    ds = _load_eval_data(args, net)
    rows = freq.sweep(net, ds, args.kind, _parse_sizes(args.sizes), batch_size=args.batch)
    out, close = _open_out(args.out)
    if args.pretty:
        _emit([freq.SWEEP_HEADER, *rows], out, True)
    else:
        freq.write_sweep_csv(rows, out)
    if close:
        out.close()
    return EXIT_OK


def cmd_eval(args) -> int:
    net, _ = arch.load_checkpoint(args.ckpt)
    ds = _load_eval_data(args, net)
    if (args.kind is None) != (args.size is None):
        raise ValidationError("--kind and --size go together")
    spec = freq.FilterSpec(args.kind, args.size) if args.kind else None
    m = evaluate(net, ds, spec, batch_size=args.batch, strict=args.strict)
    _emit([("top1", "top5", "mean_loss", "n"), (f"{m.top1:.6f}", f"{m.top5:.6f}", f"{m.mean_loss:.6f}", m.n)],
          sys.stdout, args.pretty)
    return EXIT_OK


def cmd_train(args) -> int:
    ds = data.load_image_folder(args.data, args.classes_subset, args.seed, args.strict)
    spec = resolve_arch(args.arch, args.classes or ds.num_classes, args.input or ds.side, args.stem)
    val = None
    if args.val:
        val = data.load_image_folder(args.val, strict=args.strict)
        if val.classes != ds.classes:
            raise ValidationError("val: class directories differ from the training set")
    net = arch.build(spec, seed=args.seed)
    cfg = TrainConfig(base_lr=args.lr, batch_size=args.batch, epochs=args.epochs, seed=args.seed,
                            strict_determinism=args.strict)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(net, ds, cfg, val=val, checkpoint_dir=out, log_path=args.log or out / "log.csv")
    last = result.history[-1] if result.history else None
    if last is not None:
        print(f"epoch {last['epoch']} train_loss {last['train_loss']:.6f} train_top1 {last['train_top1']:.4f}")
    print(f"checkpoint {out} sha256 {arch.checkpoint_digest(out)}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    spec = data.SyntheticSpec(args.classes, args.side, args.per_class, args.sigma, args.seed)
    root = data.save_image_folder(data.synthetic_dataset(spec), args.out)
    print(f"{root} {spec.num_classes} classes x {spec.per_class} images, {spec.side}x{spec.side}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scenenet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def arch_flags(p, with_input=True):
        p.add_argument("--arch", required=True, help="config file or preset (resnet50, resnet50x0.5, dn, dn+dp)")
        p.add_argument("--classes", type=int, help="override the number of output classes")
        p.add_argument("--stem", choices=arch.STEMS, help="override the stem variant")
        if with_input:
            p.add_argument("--input", type=int, help="square input side")

    def eval_flags(p):
        p.add_argument("--ckpt", required=True, help="checkpoint directory")
        p.add_argument("--data", required=True, help="image-folder dataset root")
        p.add_argument("--classes-subset", type=int, help="keep a seeded random subset of k classes")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--batch", type=int, default=256)
        p.add_argument("--strict", action="store_true", help="serial, bit-reproducible execution")
        p.add_argument("--pretty", action="store_true")

    p = sub.add_parser("describe", help="list layers with output shapes and parameter counts")
    arch_flags(p)
    p.add_argument("--all", action="store_true", help="include norm, activation, pooling and projection layers")
    p.add_argument("--out")
    p.add_argument("--pretty", action="store_true")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("cost", help="print '<model> <gflops> <params_m>'")
    arch_flags(p)
    p.add_argument("--out", help="write the per-layer CSV here")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("filter", help="low/high-pass filter an image or image tree")
    p.add_argument("--data", required=True)
    p.add_argument("--kind", required=True, choices=freq.KINDS)
    p.add_argument("--size", required=True, type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--mask", help="also write the mask image here")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("sweep", help="accuracy over a range of filter sizes")
    eval_flags(p)
    p.add_argument("--kind", required=True, choices=freq.KINDS)
    p.add_argument("--sizes", required=True, help="comma-separated filter sizes")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="top-1/top-5 of a checkpoint on a dataset")
    eval_flags(p)
    p.add_argument("--kind", choices=freq.KINDS)
    p.add_argument("--size", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train", help="train a network on an image-folder dataset")
    arch_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--log", help="CSV log path (default: <out>/log.csv)")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes-subset", type=int)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gen-data", help="write the synthetic grating dataset as an image folder")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, DimensionError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

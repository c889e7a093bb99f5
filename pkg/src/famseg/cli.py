"""Command-line entry point: gen, train, eval, infer, gradcheck, cost.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure
(divergence or failed gradient check), 5 incompatible checkpoint.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ConfigError, Experiment, load_config
from .data import DataError, class_pixel_stats, generate, load_image, read_manifest, write_dataset
from .metrics import cost_report, format_cost_report, report, report_record
from .model import FAMSeg
from .tensor import NumericError
from .train import DivergenceError, IncompatibleError, evaluate, infer, load_model, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_INCOMPATIBLE = 0, 2, 3, 4, 5
GRADCHECK_MODULES = ("strip", "mamba", "fam", "hamburger", "full")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _experiment(path) -> Experiment:
    return load_config(path) if path else Experiment()


def cmd_gen(args):
    exp = _experiment(args.spec)
    samples = generate(exp.phantom, args.n, args.seed)
    manifest = write_dataset(samples, args.out, tuple(args.ratios), args.seed)
    stats = class_pixel_stats(samples, exp.phantom.num_classes)
    print(f"wrote {len(samples)} pairs to {manifest}")
    total = stats.pop("total")
    for name, count in stats.items():
        print(f"{name:4s}{count:10d}  {100 * count / total:6.2f}%")
    return EXIT_OK


def cmd_train(args):
    exp = _experiment(args.config)
    cfg = exp.train
    if args.seed is not None:
        cfg.seed = args.seed
    c = cfg.num_classes
    train_set = read_manifest(args.data, "train", c)
    val_set = read_manifest(args.data, "val", c)
    if not train_set or not val_set:
        raise CliError(f"{args.data}: manifest needs non-empty train and val splits", EXIT_DATA)
    print("# config")
    print(exp.text.rstrip() or "# (all defaults)")

    def show(rec):
        print(json.dumps(rec), flush=True)

    res = train(cfg, train_set, val_set, out_dir=args.out, resume=args.resume, config_text=exp.text,
                on_record=show)
    print(f"best val mIoU {res.best_val:.4f} at epoch {res.best_epoch}; checkpoint {Path(args.out) / 'best.ck'}")
    return EXIT_OK


def _load(path):
    try:
        return load_model(path)
    except FileNotFoundError as e:
        raise CliError(f"{path}: no such checkpoint", EXIT_DATA) from e
    except checkpoint.CheckpointError as e:
        raise CliError(str(e), EXIT_INCOMPATIBLE) from e


def cmd_eval(args):
    model, *_ = _load(args.ckpt)
    samples = read_manifest(args.data, None if args.split == "all" else args.split,
                            num_classes=max(model.cfg.decoder.num_classes, 256))
    if not samples:
        raise CliError(f"{args.data}: no samples in split {args.split!r}", EXIT_DATA)
    cm = evaluate(model, samples)
    print(report(cm, args.split))
    print(report_record(cm, split=args.split, images=len(samples)))
    return EXIT_OK


def cmd_infer(args):
    model, *_ = _load(args.ckpt)
    image = load_image(args.image)
    size = image.shape[1:]
    if size[0] % 32 or size[1] % 32:
        raise CliError(f"{args.image}: image size {size} is not divisible by 32", EXIT_DATA)
    palette = args.palette
    if palette == "auto":
        out = Path(args.out)
        palette = out.with_name(out.stem + "_palette" + out.suffix)
    mask = infer(model, image, args.out, palette)
    counts = np.bincount(mask.reshape(-1), minlength=model.cfg.decoder.num_classes)
    print(f"wrote {args.out}" + (f" and {palette}" if palette else "") + f"; class pixels {counts.tolist()}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .suites import GRADCHECK_SUITES

    names = GRADCHECK_MODULES if args.module == "all" else (args.module,)
    failed = False
    for name in names:
        rep = GRADCHECK_SUITES[name](tol=args.tol, h=args.h)
        failed |= not rep.passed
        print(f"{name:10s} {rep}", flush=True)
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_cost(args):
    exp = _experiment(args.config)
    model = FAMSeg(exp.train.model, seed=exp.train.seed)
    rep = cost_report(model, exp.phantom.image_size)
    print(format_cost_report(rep))
    bad = [r for r in rep["blocks"] if r["ours"] * r["K"] != 2 * r["standard"]]
    return EXIT_NUMERIC if bad else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="famseg", description="Strip-convolution segmentation network toolkit.",
                                formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic phantom dataset", formatter_class=fmt)
    g.add_argument("--spec", default=None, help="config file with a [phantom] section (defaults if omitted)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--n", type=int, default=200, help="number of image/mask pairs")
    g.add_argument("--seed", type=int, default=0, help="master seed")
    g.add_argument("--ratios", type=float, nargs=3, default=(0.8, 0.1, 0.1), help="train/val/test split ratios")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model", formatter_class=fmt)
    t.add_argument("--config", default=None, help="experiment config file (defaults if omitted)")
    t.add_argument("--data", required=True, help="dataset directory with a manifest")
    t.add_argument("--out", required=True, help="directory for checkpoints and log.jsonl")
    t.add_argument("--seed", type=int, default=None, help="override [train] seed")
    t.add_argument("--resume", default=None, help="resume from a last.ck checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=fmt)
    e.add_argument("--ckpt", required=True, help="checkpoint file")
    e.add_argument("--data", required=True, help="dataset directory with a manifest")
    e.add_argument("--split", default="val", choices=("train", "val", "test", "all"), help="manifest split")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="segment one image", formatter_class=fmt)
    i.add_argument("--ckpt", required=True, help="checkpoint file")
    i.add_argument("--image", required=True, help="input RGB or grey PNG")
    i.add_argument("--out", required=True, help="output index-mask PNG")
    i.add_argument("--palette", nargs="?", const="auto", default=None,
                   help="also write a colour PNG (FL red, FB green); optional path, else <out>_palette.png")
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks", formatter_class=fmt)
    c.add_argument("--module", default="all", choices=("all",) + GRADCHECK_MODULES, help="suite to run")
    c.add_argument("--tol", type=float, default=1e-4, help="max relative error")
    c.add_argument("--h", type=float, default=1e-4, help="central-difference step")
    c.set_defaults(func=cmd_gradcheck)

    k = sub.add_parser("cost", help="strip-convolution cost accounting", formatter_class=fmt)
    k.add_argument("--config", default=None, help="experiment config file (defaults if omitted)")
    k.set_defaults(func=cmd_cost)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except IncompatibleError as e:
        print(f"incompatible: {e}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (DivergenceError, NumericError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``landseg <command> [flags]`` or ``python -m landseg``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import cbir, gradcheck
from .checkpoint import load_checkpoint
from .data import (CLASS_NAMES, SPLITS, decode_height, decode_image, decode_mask, encode_mask,
                   encode_rgb_mask, load_split, read_manifest, tile_path, write_bytes_atomic,
                   write_dataset)
from .metrics import ConfusionMatrix, class_assign
from .train import EvalReport, TrainConfig, evaluate, predict, read_config_file, train
from .unet import forward

EXIT_USAGE, EXIT_RUNTIME = 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file whose keys match TrainConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="pin BLAS to one thread for bit-identical runs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="landseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gendata", help="write a synthetic landform dataset")
    _shared(p)
    p.add_argument("--n", type=_positive_int, default=640)
    p.add_argument("--size", type=_positive_int, default=64)
    p.add_argument("--split", type=float, default=0.8)
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("train", help="train a U-Net on a generated dataset")
    _shared(p)
    p.add_argument("--data", dest="dataset_root")
    p.add_argument("--out", dest="checkpoint_out")
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--batch-size", dest="batch_size", type=_positive_int)
    p.add_argument("--depth", type=_positive_int)
    p.add_argument("--base-filters", dest="base_filters", type=_positive_int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--dropout", dest="dropout_rate", type=float)
    p.add_argument("--no-height", dest="use_height", action="store_false", default=None)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", help="report Dice and pixel accuracy on a split")
    _shared(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--predictions", help="score saved class-id masks ({id:05d}.png) instead of a model")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS, default="val")
    p.add_argument("--dump", help="directory to write predicted class-id masks into")

    p = sub.add_parser("segment", help="segment one landform image")
    _shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="RGB landform PNG")
    p.add_argument("--height", help="height PNG (required for 4-channel models)")
    p.add_argument("--out", required=True, help="output prefix; writes PREFIX_mask.png and PREFIX_color.png")

    p = sub.add_parser("index", help="build a binary-hash retrieval index")
    _shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS, default="val")
    p.add_argument("--limit", type=_positive_int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("retrieve", help="rank indexed images against a query image")
    _shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--height")
    p.add_argument("--k", type=_positive_int, default=5)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer op")
    _shared(p)
    return parser


# -- commands ----------------------------------------------------------------


def _train_config(args) -> TrainConfig:
    values = read_config_file(args.config) if args.config else {}
    for f in fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    cfg = TrainConfig.from_mapping(values)
    if "use_height" in values and "in_channels" not in values:
        cfg.in_channels = 4 if cfg.use_height else 3
    return cfg


def cmd_gendata(args) -> int:
    seed = args.seed if args.seed is not None else 0
    manifest = write_dataset(args.n, seed, args.size, args.split, args.out, args.overwrite)
    s = manifest["splits"]
    print(f"wrote {args.n} tiles ({len(s['train'])} train, {len(s['val'])} val) "
          f"of {args.size}x{args.size} to {args.out} (seed {seed})")
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    result = train(cfg, resume=args.resume)
    last = result.history[-1]
    print(f"trained {last['epoch']} epochs; final val macro Dice {last['val_macro_dice']:.4f}, "
          f"val accuracy {last['val_accuracy']:.4f}; best val Dice {result.best_val_dice:.4f}")
    print(f"checkpoints and metrics.csv in {result.out_dir}")
    return 0


def _use_height(model) -> bool:
    return model.config.in_channels == 4


def print_report(rep: EvalReport, split: str) -> None:
    print(f"split {split}: {rep.n_tiles} tiles")
    for name, d in zip(CLASS_NAMES, rep.per_class_dice):
        print(f"  dice[{name}] = {d:.6f}")
    print(f"  macro_dice = {rep.macro_dice:.6f}")
    print(f"  pixel_accuracy = {rep.accuracy:.6f}")


def _score_saved_masks(args) -> int:
    ids = read_manifest(args.data)["splits"][args.split]
    if not ids:
        raise ValueError(f"split {args.split!r} under {args.data} is empty")
    cm = ConfusionMatrix(len(CLASS_NAMES))
    for i in ids:
        pred = decode_mask(Path(args.predictions) / f"{i:05d}.png")
        cm.update(pred, decode_mask(tile_path(args.data, args.split, "mask", i)))
    print_report(EvalReport(cm.per_class_dice(), cm.macro_dice(), cm.accuracy(), len(ids)), args.split)
    return 0


def cmd_eval(args) -> int:
    if args.predictions:
        if args.dump:
            raise UsageError("--dump needs --checkpoint")
        return _score_saved_masks(args)
    model = load_checkpoint(args.checkpoint).model
    size = read_manifest(args.data)["generator"]["size"]
    if size % 2**model.config.depth:
        raise ValueError(f"dataset tile size {size} is not a multiple of 2**depth for this checkpoint")
    ids, x, y = load_split(args.data, args.split, _use_height(model))
    if x.shape[1] != model.config.in_channels:
        raise ValueError("checkpoint channel count does not match the dataset inputs")
    rep = evaluate(model, x, y)
    print_report(rep, args.split)
    if args.dump:
        out = Path(args.dump)
        out.mkdir(parents=True, exist_ok=True)
        for i, m in zip(ids, predict(model, x)):
            write_bytes_atomic(out / f"{i:05d}.png", encode_mask(m))
    return 0


def _load_input(model, image_path, height_path) -> np.ndarray:
    img = decode_image(Path(image_path).read_bytes())
    if _use_height(model):
        if not height_path:
            raise UsageError("this checkpoint expects a height map; pass --height")
        img = np.concatenate([img, decode_height(Path(height_path).read_bytes())])
    mult = 2**model.config.depth
    h, w = img.shape[1:]
    if h % mult or w % mult:
        raise ValueError(f"input size {h}x{w} must be a multiple of {mult} in both dimensions")
    return img


def cmd_segment(args) -> int:
    model = load_checkpoint(args.checkpoint).model
    img = _load_input(model, args.input, args.height)
    probs, _ = forward(model, img[None], "eval")
    mask = class_assign(probs)[0]
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    write_bytes_atomic(prefix.with_name(prefix.name + "_mask.png"), encode_mask(mask))
    write_bytes_atomic(prefix.with_name(prefix.name + "_color.png"), encode_rgb_mask(mask))
    frac = np.bincount(mask.ravel(), minlength=len(CLASS_NAMES)) / mask.size
    for name, f in zip(CLASS_NAMES, frac):
        print(f"{name}: {f:.4f}")
    return 0


def cmd_index(args) -> int:
    model = load_checkpoint(args.checkpoint).model
    ids, x, _ = load_split(args.data, args.split, _use_height(model))
    if args.limit:
        ids, x = ids[: args.limit], x[: args.limit]
    index = cbir.build_index(model, [(f"{i:05d}", img) for i, img in zip(ids, x)])
    cbir.save_index(args.out, index)
    print(f"indexed {len(index)} images with {index.bits}-bit codes -> {args.out}")
    return 0


def cmd_retrieve(args) -> int:
    model = load_checkpoint(args.checkpoint).model
    index = cbir.load_index(args.index)
    img = _load_input(model, args.image, args.height)
    try:
        hits = cbir.query(index, model, img, args.k)
    except cbir.StaleIndexError as exc:
        raise cbir.StaleIndexError(f"{exc} (run `landseg index` with this checkpoint)") from None
    print("rank,id,distance")
    for rank, (i, d) in enumerate(hits, 1):
        print(f"{rank},{i},{d}")
    return 0


def cmd_gradcheck(args) -> int:
    reports = gradcheck.run_suite(seed=args.seed or 0)
    for r in reports:
        print(r.line())
    failed = [r.name for r in reports if not r.passed]
    if failed:
        print(f"gradient check FAILED for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"all {len(reports)} gradient checks passed")
    return 0


COMMANDS = dict(gendata=cmd_gendata, train=cmd_train, eval=cmd_eval, segment=cmd_segment,
                index=cmd_index, retrieve=cmd_retrieve, gradcheck=cmd_gradcheck)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - one-line cause, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

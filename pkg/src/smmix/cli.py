"""Command line entry point: ``smmix <subcommand>``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, mixing
from .config import field_types, load_config, parse_value, write_config_file
from .data import load_arrays, read_header, synth_generate
from .train import Trainer, evaluate, model_from_checkpoint, one_hot, unmixed_pass

LOG_ENV = "SMMIX_LOG_LEVEL"
log = logging.getLogger("smmix")


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    for key in field_types():
        p.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, default=None, metavar="VALUE")


def _overrides(args: argparse.Namespace) -> dict:
    out = {}
    for key in field_types():
        text = getattr(args, "cfg_" + key)
        if text is not None:
            out[key] = parse_value(key, text)
    return out


def cmd_generate(args) -> int:
    path = synth_generate(args.n, args.out, seed=args.seed, size=args.size,
                          channels=args.channels, num_classes=args.classes,
                          train_fraction=args.train_fraction)
    print(f"wrote {args.n} samples to {path}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    if not cfg.data_dir or not cfg.out_dir:
        raise SystemExit("train needs data_dir and out_dir (config file or --data-dir/--out-dir)")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config_file(cfg, out / "config.txt")
    xtr, ytr = load_arrays(cfg.data_dir, "train")
    xva, yva = load_arrays(cfg.data_dir, "val")
    trainer = Trainer(cfg, xtr, ytr, xva if len(xva) else None, yva if len(yva) else None)
    if args.resume:
        trainer.load(args.resume)
    trainer.run(args.steps, out / "metrics.csv")
    ckpt = trainer.save(out / "checkpoint.smmx")
    print(f"step {trainer.step}/{trainer.total_steps}; checkpoint {ckpt}")
    return 0


def cmd_eval(args) -> int:
    model = model_from_checkpoint(args.checkpoint)
    x, y = load_arrays(args.data, args.split)
    print(json.dumps(evaluate(model, x, y)))
    return 0


def cmd_mix_preview(args) -> int:
    x, y = load_arrays(args.data, args.split)
    x = x[:args.n]
    y = y[:args.n]
    rng = mixing.make_rng(args.seed, 3)
    classes = read_header(args.data).num_classes
    if args.mode == "smmix":
        if not args.checkpoint:
            raise SystemExit("smmix preview needs --checkpoint (attention comes from the model)")
        model = model_from_checkpoint(args.checkpoint)
        alphas, _ = unmixed_pass(model, x.astype(model.dtype))
        batch = mixing.apply_smmix(x, one_hot(y, model.cfg.num_classes), alphas, rng,
                                   model.cfg.patch_size, args.delta_mode)
    elif args.mode == "cutmix":
        batch = mixing.apply_cutmix(x, one_hot(y, classes), rng, args.patch_size)
    else:
        batch = mixing.apply_mixup(x, one_hot(y, classes), rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".pgm" if x.shape[1] == 1 else ".ppm"
    for i, img in enumerate(batch.images):
        analysis.write_pnm(out / f"mixed_{i:03d}{ext}", analysis.to_uint8_image(img))
    if batch.plans:
        (out / "plans.jsonl").write_text("".join(p.to_record() + "\n" for p in batch.plans))
    print(f"wrote {len(batch.images)} mixed images to {out}")
    return 0


def cmd_attn_stats(args) -> int:
    model = model_from_checkpoint(args.checkpoint)
    x, y = load_arrays(args.data, args.split)
    if args.limit:
        x, y = x[:args.limit], y[:args.limit]
    mixed = analysis.build_mixed_set(model, x, y, args.mode, seed=args.seed)
    stats = analysis.attention_stats_for_set(model, mixed, args.block)
    path = analysis.write_stats_csv(args.out, stats)
    print(f"wrote {len(stats)} rows to {path}")
    if args.topk:
        print(json.dumps(analysis.mixed_top_k_accuracy(model, mixed)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smmix", description="SMMix ViT training lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="render the synthetic shape dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model; every config key is also a flag")
    p.add_argument("--config", help="flat key = value file")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--steps", type=int, help="stop after this many more steps")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1, per-class accuracy and mean CE")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mix-preview", help="write mixed images and their mix plans")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("smmix", "cutmix", "mixup"), default="smmix")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="train")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch-size", type=int, default=4)
    p.add_argument("--delta-mode", choices=("uniform", "fixed", "unit"), default="uniform")
    p.set_defaults(func=cmd_mix_preview)

    p = sub.add_parser("attn-stats", help="region attention averages on mixed validation images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--split", default="val")
    p.add_argument("--mode", choices=("smmix", "cutmix"), default="smmix")
    p.add_argument("--block", type=int, help="1-based block (default: last)")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--topk", action="store_true", help="also print mixed top-1/top-2 accuracy")
    p.set_defaults(func=cmd_attn_stats)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

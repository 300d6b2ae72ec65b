#! python

import argparse
import sys
import time
from pathlib import Path

import numpy as np
import torch
from pydantic import ValidationError as PydanticValidationError
from termcolor import colored

from arbinpaint.adversarial import Discriminator, build_extractor
from arbinpaint.config import Config, parse_config, split_overrides
from arbinpaint.core_types import load_image, load_mask, save_image
from arbinpaint.dataset import SampleManifest, build_realworld_split, materialize_split
from arbinpaint.errors import CheckpointError, MaskGenerationError, TrainingAbortError, ValidationError
from arbinpaint.evaluation import EvalConfig, GeneratorModel, run_experiment
from arbinpaint.generator import Generator, build_generator, count_parameters, inpaint
from arbinpaint.maskgen import write_mask_corpus
from arbinpaint.training import Trainer, load_generator
from utils.log_util import logger
from utils.settings import settings

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_TRAINING_ABORT = 3

DEFAULT_CONFIG = Path("tomls/default.toml")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="arbinpaint",
        description="Arbitrary-resolution image inpainting: masks, splits, training, inference, evaluation.",
        epilog="Any config value can be overridden with a dotted flag, e.g. --train.epochs 1 --model.nab.kernel 5",
    )
    parser.add_argument("--config", type=Path, default=None, help=f"TOML config (default {DEFAULT_CONFIG} if present)")
    parser.add_argument("--seed", type=int, default=None, help="seed for mask corpora and training")
    sub = parser.add_subparsers(dest="command", required=True)

    masks = sub.add_parser("make-masks", help="write a frozen free-form mask corpus")
    masks.add_argument("--out", type=Path, default=None)
    masks.add_argument("--count", type=int, default=None)
    masks.add_argument("--height", type=int, default=None)
    masks.add_argument("--width", type=int, default=None)

    splits = sub.add_parser("make-splits", help="crop source images into aspect-ratio splits")
    splits.add_argument("--src", type=Path, default=None)
    splits.add_argument("--out", type=Path, default=None)

    train = sub.add_parser("train", help="train generator and discriminator")
    train.add_argument("--manifest", type=Path, default=None)
    train.add_argument("--out", type=Path, default=Path("runs/train"))
    train.add_argument("--resume", type=Path, default=None)
    train.add_argument("--max-steps", type=int, default=None)

    infer = sub.add_parser("infer", help="inpaint one image")
    infer.add_argument("--checkpoint", type=Path, required=True)
    infer.add_argument("--image", type=Path, required=True)
    infer.add_argument("--mask", type=Path, required=True)
    infer.add_argument("--out", type=Path, required=True)
    infer.add_argument("--height", type=int, default=None, help="output height (default: input height)")
    infer.add_argument("--width", type=int, default=None, help="output width (default: input width)")
    infer.add_argument("--raw", action="store_true", help="skip compositing known pixels back in")

    evaluate = sub.add_parser("eval", help="score a checkpoint on split manifests")
    evaluate.add_argument("--checkpoint", type=Path, default=None)
    evaluate.add_argument("--split", type=Path, action="append", default=None, help="split manifest (repeatable)")
    evaluate.add_argument("--masks", type=Path, default=None)
    evaluate.add_argument("--adapter", action="append", default=None, help="adapter kind (repeatable)")
    evaluate.add_argument("--out", type=Path, default=None)

    bench = sub.add_parser("bench", help="parameter counts and forward latency")
    bench.add_argument("--height", type=int, default=512)
    bench.add_argument("--width", type=int, default=512)
    bench.add_argument("--repeats", type=int, default=3)
    return parser


def make_masks(cfg: Config, args: argparse.Namespace) -> None:
    data = cfg.data
    write_mask_corpus(
        args.out or data.mask_dir,
        args.count or data.mask_count,
        args.height or data.mask_height,
        args.width or data.mask_width,
        cfg.masks,
        cfg.masks.seed,
    )


def make_splits(cfg: Config, args: argparse.Namespace) -> None:
    src = args.src or cfg.data.split_sources
    if src is None:
        raise ValidationError("no split source directory; pass --src or set data.split_sources")
    out = args.out or cfg.data.split_dir
    for spec in cfg.data.splits:
        manifest = build_realworld_split(src, spec, cfg.data.split_mask_seed)
        materialize_split(manifest, out / spec.name.replace(":", "x"))


def train(cfg: Config, args: argparse.Namespace) -> None:
    manifest_path = args.manifest or cfg.data.train_manifest
    if manifest_path is None:
        raise ValidationError("no training manifest; pass --manifest or set data.train_manifest")
    trainer = Trainer(cfg.train, cfg.model, cfg.discriminator, cfg.extractor, cfg.masks, args.out)
    if args.resume is not None:
        trainer.resume(args.resume)
    trainer.fit(SampleManifest.read(manifest_path), max_steps=args.max_steps)


def infer(cfg: Config, args: argparse.Namespace) -> None:
    generator = load_generator(args.checkpoint, cfg.model)
    img = load_image(args.image)
    out = inpaint(generator, img, load_mask(args.mask), args.height, args.width, composite_output=not args.raw)
    save_image(out, args.out)
    logger.info(f"Wrote {out.shape[1]}x{out.shape[0]} result to {colored(str(args.out), 'light_cyan')}")


def evaluate(cfg: Config, args: argparse.Namespace) -> None:
    updates = {
        "checkpoint": args.checkpoint,
        "splits": args.split,
        "masks": args.masks,
        "adapters": args.adapter,
        "out_dir": args.out,
    }
    eval_cfg = EvalConfig.model_validate(
        cfg.eval.model_dump() | {k: v for k, v in updates.items() if v is not None}
    )
    if eval_cfg.checkpoint is not None:
        generator = load_generator(eval_cfg.checkpoint, cfg.model)
    else:
        logger.warning("No checkpoint given; evaluating an untrained generator")
        generator = build_generator(cfg.model, seed=cfg.train.seed)
    report = run_experiment(eval_cfg, GeneratorModel(generator), build_extractor(cfg.extractor), cfg.masks)
    print(report.to_table())
    if report.failures:
        logger.warning(f"{len(report.failures)} images failed; see the log for details")


@torch.no_grad()
def bench(cfg: Config, args: argparse.Namespace) -> None:
    generator: Generator = build_generator(cfg.model, seed=cfg.train.seed).eval()
    discriminator = Discriminator(cfg.discriminator)
    img = torch.rand(1, 3, args.height, args.width, generator=torch.Generator().manual_seed(0))
    mask = torch.zeros(1, 1, args.height, args.width)
    mask[..., args.height // 4 : args.height // 2, args.width // 4 : args.width // 2] = 1.0

    generator(img, mask)
    timings = []
    for _ in range(args.repeats):
        start = time.perf_counter()
        generator(img, mask)
        timings.append(time.perf_counter() - start)

    print(f"{'network':<16}{'params (M)':>12}{'latency (ms)':>14}")
    print(f"{'generator':<16}{count_parameters(generator) / 1e6:>12.3f}{1000 * float(np.mean(timings)):>14.1f}")
    print(f"{'discriminator':<16}{count_parameters(discriminator) / 1e6:>12.3f}{'-':>14}")


COMMANDS = {
    "make-masks": make_masks,
    "make-splits": make_splits,
    "train": train,
    "infer": infer,
    "eval": evaluate,
    "bench": bench,
}


def main(argv: list[str] | None = None) -> int:
    rest, dotted = split_overrides(sys.argv[1:] if argv is None else argv)
    args, extra = build_parser().parse_known_args(rest)
    if settings.torch_threads > 0:
        torch.set_num_threads(settings.torch_threads)

    try:
        overrides = dotted + list(extra)
        if args.seed is not None:
            overrides += ["--train.seed", str(args.seed), "--masks.seed", str(args.seed)]
        config_path = args.config or (DEFAULT_CONFIG if DEFAULT_CONFIG.exists() else None)
        cfg = parse_config(config_path, overrides)
        COMMANDS[args.command](cfg, args)
    except TrainingAbortError as e:
        logger.error(f"Training aborted: {e}")
        return EXIT_TRAINING_ABORT
    except (ValidationError, PydanticValidationError, MaskGenerationError) as e:
        logger.error(f"{colored(args.command, 'red')} failed: {e}")
        return EXIT_VALIDATION
    except (OSError, CheckpointError) as e:
        logger.error(f"{colored(args.command, 'red')} failed on I/O: {e}")
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

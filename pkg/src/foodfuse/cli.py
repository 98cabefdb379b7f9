"""Command-line entry point: forge -> train -> compose -> evaluate, plus inspect.

Exit codes: 0 success, 2 config/usage error, 3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import torch

from .checkpoint import CheckpointError, file_digest, load_model, save_checkpoint
from .codec import fit_codec
from .config import ConfigError, load_config
from .diffusion import SamplerConfig
from .evaluation import evaluate, write_report
from .forge import build_dataset, load_split
from .images import load_png, save_png, to_array, to_tensor
from .model import CompositionModel
from .numerics import NumericalError
from .training import Trainer, TrainingAborted, write_curve

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def _cmd_forge(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    forge_cfg = cfg.forge_config()
    if args.count is not None:
        forge_cfg = dataclasses.replace(forge_cfg, triplet_count=args.count)
    if args.seed is not None:
        forge_cfg = dataclasses.replace(forge_cfg, seed=args.seed)
    try:
        forge_cfg.validate()
    except ValueError as exc:
        raise ConfigError("forge", str(exc)) from exc
    summary = build_dataset(forge_cfg, args.out or cfg.paths.data_dir, workers=args.workers)
    print(f"accepted {summary.accepted} rejected {summary.rejected}")
    print(" ".join(f"{k} {v}" for k, v in summary.splits.items()))
    return EXIT_OK


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    train_cfg = cfg.train_config()
    overrides = {}
    if args.freeze_trunk:
        overrides["freeze_trunk"] = True
    if args.max_steps is not None:
        overrides["max_steps"] = args.max_steps
    if args.no_cscm:
        overrides["use_cscm"] = False
    if args.no_fusion:
        overrides["use_fusion"] = False
    train_cfg = dataclasses.replace(train_cfg, **overrides)
    data = args.data or cfg.paths.data_dir
    train, val = load_split(data, "train"), load_split(data, "val")
    if train and train[0].ground_truth.shape[0] != cfg.image_size:
        raise ConfigError("image_size", f"expected {cfg.image_size}, dataset has {train[0].ground_truth.shape[0]}")
    start = args.resume or args.init
    opt_state, step, epoch = None, 0, 0
    if start:
        model, ckpt = load_model(start)
        if model.cfg.digest() != cfg.model_config().digest():
            raise ConfigError("config", f"checkpoint digest {model.cfg.digest()} != config digest {cfg.model_config().digest()}")
        if args.resume:
            opt_state = ckpt.optimizer
            step, epoch = ckpt.header["meta"].get("step", 0), ckpt.header["meta"].get("epoch", 0)
    else:
        model = CompositionModel(cfg.model_config())
        if cfg.codec.mode == "learned":
            images = to_tensor([r.ground_truth for r in train] + [r.background for r in train])
            fit_codec(model.codec, images, steps=train_cfg.codec_steps, seed=cfg.seed)
    out = Path(args.out or cfg.paths.checkpoint)
    trainer = Trainer(model, train, val, train_cfg, optimizer_state=opt_state, step=step, epoch=epoch)
    meta = {"run_digest": cfg.digest(), "freeze_trunk": train_cfg.freeze_trunk}
    try:
        trainer.run()
    except TrainingAborted as exc:
        save_checkpoint(out, model, {**meta, "step": exc.step, "aborted": True}, trainer.optimizer_state())
        write_curve(args.curve or out.with_suffix(".loss.csv"), trainer.curve)
        raise
    trainer.finalize()
    save_checkpoint(out, model, {**meta, "step": trainer.step, "epoch": trainer.epoch, "best_step": trainer.best_step,
                                 "best_val": trainer.best_val if trainer.best_state is not None else None},
                    trainer.optimizer_state())
    write_curve(args.curve or out.with_suffix(".loss.csv"), trainer.curve)
    last = trainer.curve[-1].train_loss if trainer.curve else float("nan")
    print(f"steps {trainer.step} final_train_loss {last:.4f} best_val {trainer.best_val:.4f} -> {out}")
    return EXIT_OK


def _sampler(args: argparse.Namespace) -> SamplerConfig:
    return SamplerConfig(steps=args.steps, guidance_scale=args.guidance, eta=args.eta, seed=args.seed)


def _cmd_compose(args: argparse.Namespace) -> int:
    model, _ = load_model(args.ckpt)
    size = model.cfg.image_size
    fgs = [load_png(p) for p in args.foreground]
    bg = load_png(args.background)
    for name, im in [("background", bg)] + [(f"foreground {p}", f) for p, f in zip(args.foreground, fgs)]:
        if im.shape[:2] != (size, size):
            raise ConfigError(name, f"expected {size}x{size}, got {im.shape[1]}x{im.shape[0]}")
    sampler = _sampler(args)
    try:
        sampler.validate(model.schedule.T)
    except ValueError as exc:
        raise ConfigError("sampler", str(exc)) from exc
    out = model.compose([to_tensor(f) for f in fgs], to_tensor(bg), sampler,
                        use_cscm=not args.no_cscm, conditional_only=args.conditional_only)
    save_png(args.out, to_array(out))
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_evaluate(args: argparse.Namespace) -> int:
    model, ckpt = load_model(args.ckpt)
    if args.config:
        expected = load_config(args.config).model_config().digest()
        if expected != ckpt.config_digest:
            raise ConfigError("config", f"digest mismatch: config {expected} vs checkpoint {ckpt.config_digest}")
    records = load_split(args.data, args.split)
    if not records:
        raise ConfigError("split", f"split {args.split!r} is empty or missing in {args.data}")
    if records[0].ground_truth.shape[0] != model.cfg.image_size:
        raise ConfigError("image_size", f"expected {model.cfg.image_size}, data has {records[0].ground_truth.shape[0]}")
    report, composites = evaluate(model, records, _sampler(args), no_cscm=args.no_cscm, no_fusion=args.no_fusion,
                                  oracle=args.oracle, checkpoint_digest=file_digest(args.ckpt))
    write_report(report, args.report, records, composites)
    print(f"n {report.count} psnr {report.psnr:.3f} dB perceptual_proxy {report.perceptual:.4f}")
    return EXIT_OK


def _cmd_inspect(args: argparse.Namespace) -> int:
    model, ckpt = load_model(args.ckpt)
    print(f"config_digest {ckpt.config_digest}")
    print(f"format_version {ckpt.header['format_version']}")
    for group, params in model.groups().items():
        print(f"{group} {sum(p.numel() for p in params.values())}")
    for key, value in sorted(ckpt.header.get("meta", {}).items()):
        print(f"meta.{key} {value}")
    return EXIT_OK


def _cmd_init(args: argparse.Namespace) -> int:
    """Write an untrained checkpoint for the given config."""
    cfg = load_config(args.config)
    model = CompositionModel(cfg.model_config())
    save_checkpoint(args.out, model, {"run_digest": cfg.digest(), "step": 0})
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="foodfuse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forge", help="build a procedural triplet dataset")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_forge)

    p = sub.add_parser("train", help="train a checkpoint on a forged dataset")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--curve", help="loss-curve CSV (default: <out>.loss.csv)")
    p.add_argument("--init", help="start from this checkpoint's weights")
    p.add_argument("--resume", help="continue this checkpoint, including optimizer state")
    p.add_argument("--freeze-trunk", action="store_true")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--no-cscm", action="store_true", help="train without the control branch")
    p.add_argument("--no-fusion", action="store_true", help="train with a single-image context")
    p.set_defaults(func=_cmd_train)

    for name, func, helptext in (("compose", _cmd_compose, "compose one image"),
                                 ("evaluate", _cmd_evaluate, "score a split")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--steps", type=int, default=30)
        p.add_argument("--guidance", type=float, default=1.5)
        p.add_argument("--eta", type=float, default=0.0)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--no-cscm", action="store_true")
        p.set_defaults(func=func)
        if name == "compose":
            p.add_argument("--foreground", action="append", required=True)
            p.add_argument("--background", required=True)
            p.add_argument("--out", required=True)
            p.add_argument("--conditional-only", action="store_true", help="skip the unconditional branch")
        else:
            p.add_argument("--data", required=True)
            p.add_argument("--split", default="test")
            p.add_argument("--report", required=True)
            p.add_argument("--config")
            p.add_argument("--no-fusion", action="store_true")
            p.add_argument("--oracle", action="store_true", help="score ground truth against itself")

    p = sub.add_parser("inspect", help="summarize a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("init", help="write an untrained checkpoint")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_init)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

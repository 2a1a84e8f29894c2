"""Command-line entry point: ``eosr {train,validate,infer,inspect-config}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import Config, ConfigError, dump_config, load_config

log = logging.getLogger("eosr")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _add_config_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--config", required=required, help="YAML experiment config")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted-key override, e.g. Training.EMA.enabled=false (repeatable)",
    )
    p.add_argument("--seed", type=int, help="seed for init, sampling, latents and patch crops")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eosr", description="Super-resolution GAN training for multispectral imagery")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a generator/discriminator pair")
    _add_config_args(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--out", help="run directory (default: Logging.out_dir)")
    p.add_argument("--max-steps", type=int, help="stop after this global step")

    p = sub.add_parser("validate", help="score a checkpoint against HR references")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="data root (overrides Data.root)")
    p.add_argument("--out", required=True, help="report path (.json; a .csv is written alongside)")
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--previews", type=int, help="number of LR|SR|HR preview PNGs")
    p.add_argument("--no-ema", action="store_true", help="use live rather than EMA weights")

    p = sub.add_parser("infer", help="super-resolve a GeoTIFF scene")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--no-ema", action="store_true", help="use live rather than EMA weights")

    p = sub.add_parser("inspect-config", help="validate a config and print the effective settings")
    p.add_argument("path", nargs="?", help="YAML config (alternative to --config)")
    _add_config_args(p, required=False)
    return parser


def _load(args) -> Config:
    path = getattr(args, "path", None) or args.config
    if path is None:
        raise UsageError("a config file is required (positional path or --config)")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"Training.seed={args.seed}")
    data = getattr(args, "data", None)
    if data is not None:
        overrides.append(f"Data.root={data}")
    return load_config(path, overrides)


def cmd_inspect(args) -> int:
    cfg = _load(args)
    sys.stdout.write(dump_config(cfg))
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import make_dataset
    from .trainer import JsonlSink, LoggingSink, Trainer

    cfg = _load(args)
    out_dir = Path(args.out or cfg.Logging.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(dump_config(cfg))
    seed = cfg.Training.seed
    train_set = make_dataset(cfg.Data, "train", seed)
    val_set = make_dataset(cfg.Data, "val", seed)
    sinks: list = [LoggingSink()]
    if cfg.Logging.jsonl:
        sinks.append(JsonlSink(out_dir / "metrics.jsonl", append=args.resume is not None))
    trainer = Trainer(cfg, sinks=sinks)
    if args.resume:
        trainer.load_checkpoint(args.resume)
    try:
        paths = trainer.fit(train_set, val_set, out_dir=out_dir, max_steps=args.max_steps)
    finally:
        for sink in sinks:
            sink.close()
    log.info("checkpoints: last=%s best=%s", paths["last"], paths["best"])
    return EXIT_OK


def _try_perceptual(cfg: Config):
    from .perceptual import PerceptualWeightsUnavailable, build_perceptual

    try:
        return build_perceptual(cfg.Training.Losses, cfg.Data.rgb_triplet)
    except PerceptualWeightsUnavailable as exc:
        log.warning("perceptual column disabled: %s", exc)
        return None


def cmd_validate(args) -> int:
    import torch

    from . import metrics
    from .data import make_dataset
    from .trainer import VALIDATION_SEED, load_generator

    cfg = _load(args)
    net, _ = load_generator(args.checkpoint, cfg, use_ema=not args.no_ema)
    dataset = make_dataset(cfg.Data, args.split, cfg.Training.seed)
    if len(dataset) == 0:
        raise ValueError(f"no {args.split} samples found")
    srs, hrs, lrs, names = [], [], [], []
    with torch.no_grad():
        for i in range(len(dataset)):
            pair = dataset.get_pair(i)
            lr = torch.from_numpy(pair.lr.copy()).float()[None]
            z = net.sample_noise(1, seed=VALIDATION_SEED + i) if net.is_conditional else None
            srs.append(net(lr, z)[0].double())
            hrs.append(torch.from_numpy(pair.hr.copy()).double())
            lrs.append(lr[0].double())
            names.append(f"{pair.name}_{i}")
    report = metrics.evaluate(srs, hrs, lrs, cfg.Model.scale, _try_perceptual(cfg), names)
    out = Path(args.out)
    report.write(out)
    n_prev = cfg.Logging.num_val_previews if args.previews is None else args.previews
    for i in range(min(n_prev, len(srs))):
        metrics.rgb_preview(
            lrs[i].numpy(), srs[i].numpy(), hrs[i].numpy(), cfg.Data.rgb_triplet,
            out.parent / f"{out.stem}_preview_{i:03d}.png",
        )
    agg = report.aggregate
    log.info("PSNR %.3f dB  SSIM %.4f  SAM %.4f rad (n=%d)", agg["psnr_db"], agg["ssim"], agg["sam_rad"], report.n_samples)
    return EXIT_OK


def cmd_infer(args) -> int:
    from .tiling import infer_scene
    from .trainer import load_generator

    cfg = _load(args)
    inf = cfg.Inference
    net, _ = load_generator(args.checkpoint, cfg, use_ema=inf.use_ema and not args.no_ema)
    out = infer_scene(
        net,
        args.input,
        args.output,
        latent_seed=cfg.Training.seed,
        normalization=cfg.Data.normalization,
        tile_size_lr=inf.tile_size_lr,
        overlap_lr=inf.overlap_lr,
        context_lr=inf.context_lr,
        blend=inf.blend,
        output_dtype=inf.output_dtype,
    )
    log.info("wrote %s", out)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "validate": cmd_validate, "infer": cmd_infer, "inspect-config": cmd_inspect}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"eosr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"eosr: invalid configuration:\n{exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure exit code
        log.error("%s failed: %s", args.command, exc, exc_info=args.verbose)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""``candid`` command line: synth, train, denoise, eval, ablate."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import checkpoint
from .alignment import load_flow_dir
from .imaging import load_image, save_image
from .net import BurstDenoiser
from .noise import load_burst, sample_noise_params, save_burst, synthesize_burst
from .pipeline import VARIANTS, TrainConfig, ablate, conform_channels, evaluate, image_seed, list_images, train
from .prefilter import load_prefiltered

THREADS_ENV = "CANDID_THREADS"
_DEFAULTS = TrainConfig()


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig keys; flags below override it")
    p.add_argument("--dataset", help="directory of clean training images")
    p.add_argument("--checkpoint", help=f"output checkpoint path (default {_DEFAULTS.checkpoint})")
    p.add_argument("--patch-size", type=int, help=f"training crop size (default {_DEFAULTS.patch_size})")
    p.add_argument("--burst-size", type=int, help=f"frames per burst (default {_DEFAULTS.burst_size})")
    p.add_argument("--max-shift", type=float, help=f"max per-axis frame shift, px (default {_DEFAULTS.max_shift})")
    p.add_argument("--batch-size", type=int, help=f"bursts per step (default {_DEFAULTS.batch_size})")
    p.add_argument("--steps", type=int, dest="total_steps", help=f"training steps (default {_DEFAULTS.total_steps})")
    p.add_argument("--channels", type=int, choices=(1, 3), help=f"1 = grayscale, 3 = color (default {_DEFAULTS.channels})")
    p.add_argument("--lr", type=float, help=f"ADAM learning rate (default {_DEFAULTS.lr})")
    p.add_argument("--checkpoint-every", type=int, help=f"steps between checkpoints (default {_DEFAULTS.checkpoint_every})")
    p.add_argument("--seed", type=int, help=f"random seed (default {_DEFAULTS.seed})")


def _train_config(args) -> TrainConfig:
    data = TrainConfig.load(args.config).to_dict() if args.config else {}
    for f in dataclasses.fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            data[f.name] = value
    for flag in ("no_prefilter", "no_align", "no_adaptive_filter"):
        if getattr(args, flag, False):
            data[flag] = True
    cfg = TrainConfig.from_dict(data)
    if not cfg.dataset:
        raise UsageError("a dataset is required (--dataset or in --config)")
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="candid", description="Burst denoising with content-adaptive filtering.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write synthetic noisy bursts from clean images")
    p.add_argument("--input", required=True, help="directory of clean images")
    p.add_argument("--out", required=True, help="output directory; one burst directory per image")
    p.add_argument("--level", choices=("lvl1", "lvl2", "train"), default="lvl1", help="noise level (default lvl1)")
    p.add_argument("--burst-size", type=int, default=_DEFAULTS.burst_size,
                   help=f"frames per burst (default {_DEFAULTS.burst_size})")
    p.add_argument("--max-shift", type=float, default=_DEFAULTS.max_shift,
                   help=f"max per-axis shift, px (default {_DEFAULTS.max_shift})")
    p.add_argument("--channels", type=int, choices=(1, 3), default=_DEFAULTS.channels,
                   help=f"output channels (default {_DEFAULTS.channels})")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")

    p = sub.add_parser("train", help="train a model")
    _add_train_flags(p)
    p.add_argument("--resume", action="store_true", help="continue from an existing checkpoint")
    for flag in ("no-prefilter", "no-align", "no-adaptive-filter"):
        p.add_argument(f"--{flag}", action="store_true", help="ablation flag")

    p = sub.add_parser("denoise", help="denoise one burst directory")
    p.add_argument("--burst", required=True, help="burst directory (frame_000.png ..., meta.json)")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--out", required=True, help="output image path")
    p.add_argument("--error-map", help="error image path (default: error.png next to --out, written when gt.png exists)")
    p.add_argument("--error-scale", type=float, default=5.0, help="multiplier for |prediction - gt| (default 5)")
    p.add_argument("--flow-dir", help="directory of flow_001.flo ... to use instead of built-in flow")
    p.add_argument("--prefiltered-dir", help="directory with mild/ and strong/ pre-denoised frames")
    p.add_argument("--sigma-r", type=float, help="read-noise std (default: from meta.json)")
    p.add_argument("--sigma-s", type=float, help="shot-noise std (default: from meta.json)")
    p.add_argument("--seed", type=int, default=0, help="random seed; inference is deterministic (default 0)")

    for name, helptext in (("eval", "evaluate a checkpoint"), ("ablate", "train a variant and evaluate it")):
        p = sub.add_parser(name, help=helptext)
        if name == "eval":
            p.add_argument("--checkpoint", required=True, help="trained checkpoint")
            p.add_argument("--dataset", required=True, help="directory of clean evaluation images")
            p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
        else:
            _add_train_flags(p)
            p.add_argument("--variant", choices=VARIANTS, required=True, help="pipeline variant")
            p.add_argument("--eval-dataset", required=True, help="directory of clean evaluation images")
        p.add_argument("--level", choices=("lvl1", "lvl2"), default="lvl1", help="evaluation noise level (default lvl1)")
        p.add_argument("--eval-max-shift", type=float, default=_DEFAULTS.max_shift,
                       help=f"evaluation shift range, px (default {_DEFAULTS.max_shift})")
        p.add_argument("--report", help="report JSON path; a .txt table is written beside it (default: print only)")
    return parser


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> None:
    paths = list_images(args.input)
    if not paths:
        raise ValueError(f"no images in {args.input}")
    images = [conform_channels(load_image(p), args.channels) for p in paths]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path, gt in zip(paths, images):
        rng = np.random.default_rng(image_seed(path.name, args.seed))
        params = sample_noise_params(rng, args.level)
        burst = synthesize_burst(gt, args.burst_size, args.max_shift, params, rng)
        burst.seed = args.seed
        # build each burst directory aside, then move it into place
        tmp = Path(tempfile.mkdtemp(prefix=f".{path.stem}.", dir=out))
        try:
            save_burst(burst, tmp)
            final = out / path.stem
            if final.exists():
                shutil.rmtree(final)
            os.replace(tmp, final)
        finally:
            if tmp.exists():
                shutil.rmtree(tmp)
    print(f"wrote {len(paths)} bursts to {out}")


def cmd_train(args) -> None:
    cfg = _train_config(args)

    def progress(step, loss):
        if step % 100 == 0 or step == cfg.total_steps:
            logging.info("step %d loss %.6f", step, loss)

    ckpt = train(cfg, resume=args.resume, progress=progress)
    print(f"checkpoint written to {ckpt}")


def cmd_denoise(args) -> None:
    burst = load_burst(args.burst)
    model = BurstDenoiser.load(args.checkpoint)
    params = burst.params
    if args.sigma_r is not None or args.sigma_s is not None:
        if args.sigma_r is None or args.sigma_s is None:
            raise UsageError("--sigma-r and --sigma-s must be given together")
        params = type(params)(args.sigma_r, args.sigma_s)
    frames = burst.frames
    if frames.shape[1] != model.arch.channels:
        raise ValueError(f"burst has {frames.shape[1]} channels, model expects {model.arch.channels}")
    streams = None
    if args.prefiltered_dir:
        if not model.arch.prefilter:
            raise ValueError("model was trained without pre-filtered streams")
        streams = load_prefiltered(frames, burst.names, args.prefiltered_dir).stacked()
    flows = None
    if args.flow_dir:
        n, _, h, w = frames.shape
        flows = load_flow_dir(args.flow_dir, n, h, w)[None]
    pred = model.denoise(frames, params, streams=streams, flows=flows)
    save_image(pred, args.out)
    if burst.ground_truth is not None:
        err = np.clip(np.abs(pred - burst.ground_truth) * args.error_scale, 0.0, 1.0)
        save_image(err, args.error_map or Path(args.out).with_name("error.png"))
    print(f"wrote {args.out}")


def _write_report(report, path) -> None:
    if path:
        checkpoint.atomic_write(path, report.to_json().encode())
        checkpoint.atomic_write(Path(path).with_suffix(".txt"), report.table().encode())
    print(report.table(), end="")


def cmd_eval(args) -> None:
    report = evaluate(args.checkpoint, args.dataset, args.level, args.seed, max_shift=args.eval_max_shift)
    _write_report(report, args.report)


def cmd_ablate(args) -> None:
    cfg = _train_config(args)
    report = ablate(cfg, args.variant, args.eval_dataset, args.level)
    _write_report(report, args.report)


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "denoise": cmd_denoise, "eval": cmd_eval, "ablate": cmd_ablate}


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return None
    try:
        value = int(raw)
    except ValueError:
        value = 0
    if value < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return value


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        threads = _thread_limit()
    except UsageError as exc:
        print(f"candid: error: {exc}", file=sys.stderr)
        return 2
    try:
        if threads is None:
            COMMANDS[args.command](args)
        else:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=threads):
                COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"candid: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("candid: interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # one-line diagnostic, no traceback
        print(f"candid: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Dataset ingestion, training, evaluation and the ablation runner."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import checkpoint
from .alignment import burst_flows, warp
from .imaging import check_image, crop, load_image, psnr, to_grayscale
from .net import ArchConfig, BurstDenoiser
from .noise import NoiseParams, sample_noise_params, synthesize_burst
from .tensor import AdamState, NonFiniteError, adam_step, backward, l1_loss

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".pnm")
VARIANTS = ("full", "no_prefilter", "no_align", "no_adaptive_filter")
# published full-scale results on the grayscale / color evaluation bursts, dB
PUBLISHED_REFERENCE = {
    "grayscale": {"lvl1": 41.35, "lvl2": 36.61},
    "color": {"lvl1": 42.49, "lvl2": 39.18},
}
PROBE_SET_SIZE = 4


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite value at step {step}: {detail}")
        self.step = step


@dataclass
class TrainConfig:
    dataset: str = ""
    checkpoint: str = "model.ckpt"
    patch_size: int = 48
    burst_size: int = 4
    max_shift: float = 4.0
    batch_size: int = 4
    total_steps: int = 5000
    seed: int = 0
    channels: int = 1
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    # desk-scale widths; the full architecture uses 64 for both
    arch: dict = field(default_factory=lambda: {"kernel_hidden": 32, "fusion_hidden": 32})
    checkpoint_every: int = 1000
    probe_every: int = 500
    noise_mode: str = "train"
    no_prefilter: bool = False
    no_align: bool = False
    no_adaptive_filter: bool = False

    def __post_init__(self):
        if self.patch_size < 16:
            raise ValueError(f"patch_size must be >= 16, got {self.patch_size}")
        if self.burst_size < 1 or self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("burst_size and batch_size must be >= 1 and total_steps >= 0")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.max_shift < 0:
            raise ValueError("max_shift must be non-negative")
        if self.checkpoint_every < 1 or self.probe_every < 1:
            raise ValueError("checkpoint_every and probe_every must be >= 1")
        known = {f.name for f in dataclasses.fields(ArchConfig)} - {"channels", "burst_size", "prefilter",
                                                                    "align", "adaptive_filter"}
        bad = set(self.arch) - known
        if bad:
            raise ValueError(f"unknown architecture override(s): {sorted(bad)}")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ValueError(f"unknown config key(s): {unknown}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TrainConfig":
        cfg = cls.from_dict(json.loads(Path(path).read_text()))
        base = Path(path).resolve().parent
        for key in ("dataset", "checkpoint"):
            value = getattr(cfg, key)
            if value and not Path(value).is_absolute():
                setattr(cfg, key, str(base / value))
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def architecture(self) -> ArchConfig:
        return ArchConfig(channels=self.channels, burst_size=self.burst_size,
                          prefilter=not self.no_prefilter, align=not self.no_align,
                          adaptive_filter=not self.no_adaptive_filter, **self.arch)

    @property
    def variant(self) -> str:
        flags = [n for n in VARIANTS[1:] if getattr(self, n)]
        return "+".join(flags) if flags else "full"


# ---------------------------------------------------------------------------
# data


def list_images(directory: str | os.PathLike) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory {directory} does not exist")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def conform_channels(img: np.ndarray, channels: int) -> np.ndarray:
    img = check_image(img)
    if channels == 1:
        return to_grayscale(img)
    if img.shape[0] == 1:
        return np.repeat(img, 3, axis=0)
    return img


class PatchSampler:
    """Uniform random crops from a fixed list of clean images."""

    def __init__(self, images: list[np.ndarray], patch_size: int, names: list[str] | None = None):
        self.patch_size = patch_size
        self.images = [im for im in images if min(im.shape[1:]) >= patch_size]
        self.names = names
        if not images:
            raise ValueError("dataset is empty")
        if not self.images:
            raise ValueError(f"every dataset image is smaller than the {patch_size}px patch")

    def sample(self, rng: np.random.Generator, margin: int = 0) -> np.ndarray:
        """One ``patch + 2 * margin`` square crop (margin shrinks to fit small images)."""
        img = self.images[int(rng.integers(len(self.images)))]
        _, h, w = img.shape
        margin = max(0, min(margin, (min(h, w) - self.patch_size) // 2))
        size = self.patch_size + 2 * margin
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        return crop(img, top, left, size, size)

    def stream(self, rng: np.random.Generator, margin: int = 0) -> Iterator[np.ndarray]:
        while True:
            yield self.sample(rng, margin)


def load_dataset(directory: str | os.PathLike, patch_size: int, channels: int = 1) -> PatchSampler:
    paths = list_images(directory)
    if not paths:
        raise ValueError(f"no images in {directory}")
    images = [conform_channels(load_image(p), channels) for p in paths]
    return PatchSampler(images, patch_size, [p.name for p in paths])


def shift_margin(max_shift: float) -> int:
    return int(np.ceil(max_shift)) + 1


def synthesize_interior(clean: np.ndarray, n: int, max_shift: float, params: NoiseParams,
                        rng: np.random.Generator, margin: int):
    """Synthesize a burst from ``clean`` and cut ``margin`` pixels off every side.

    Shifted frames then show real scene content at their borders instead of
    clamped edge pixels, as a hand-held burst would.
    """
    burst = synthesize_burst(clean, n, max_shift, params, rng)
    _, h, w = clean.shape
    if min(h, w) <= 2 * margin:
        raise ValueError(f"image {h}x{w} too small for a {margin}px shift margin")
    sl = (slice(margin, h - margin), slice(margin, w - margin))
    return burst.frames[(..., *sl)], clean[(..., *sl)]


def training_batch(sampler: PatchSampler, cfg: TrainConfig, rng: np.random.Generator,
                   noise_mode: str | None = None):
    """Synthesize ``batch_size`` bursts; returns frames (B,N,C,P,P), clean (B,C,P,P), params."""
    frames, clean, params = [], [], []
    for _ in range(cfg.batch_size):
        big = sampler.sample(rng, shift_margin(cfg.max_shift))
        p = sample_noise_params(rng, noise_mode or cfg.noise_mode)
        f, c = synthesize_interior(big, cfg.burst_size, cfg.max_shift, p, rng,
                                   (big.shape[-1] - cfg.patch_size) // 2)
        frames.append(f)
        clean.append(c)
        params.append(p)
    return np.stack(frames), np.stack(clean), params


# ---------------------------------------------------------------------------
# training


def _write_csv(path: Path, rows: list[tuple]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "loss", "psnr_probe"])
    for step, loss, probe in rows:
        writer.writerow([step, repr(loss), "" if probe is None else repr(probe)])
    checkpoint.atomic_write(path, buf.getvalue().encode())


def _read_csv(path: Path) -> list[tuple]:
    if not path.exists():
        return []
    rows = []
    with path.open(newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append((int(rec["step"]), float(rec["loss"]), float(rec["psnr_probe"]) if rec["psnr_probe"] else None))
    return rows


def log_path(ckpt: str | os.PathLike) -> Path:
    return Path(f"{os.fspath(ckpt)}.log.csv")


def optimizer_path(ckpt: str | os.PathLike) -> Path:
    return Path(f"{os.fspath(ckpt)}.adam")


def _save_state(model: BurstDenoiser, opt: AdamState, cfg: TrainConfig, step: int, rows: list[tuple]) -> None:
    arrays = {}
    for i, (m, v) in enumerate(zip(opt.first_moment, opt.second_moment)):
        arrays[f"m.{i}"] = m
        arrays[f"v.{i}"] = v
    arrays["step_count"] = np.array([opt.step_count], dtype=np.float32)
    checkpoint.save(optimizer_path(cfg.checkpoint), arrays)
    _write_csv(log_path(cfg.checkpoint), rows)
    # weights last: a readable sidecar implies the rest of the state is on disk
    model.save(cfg.checkpoint, extra={"step": step, "config": cfg.to_dict()})


def _probe_set(cfg: TrainConfig, sampler: PatchSampler):
    probe_cfg = dataclasses.replace(cfg, batch_size=PROBE_SET_SIZE)
    return training_batch(sampler, probe_cfg, np.random.default_rng([cfg.seed, 0x9E3779B9]), "lvl1")


def _probe_psnr(model: BurstDenoiser, probe) -> float:
    frames, clean, params = probe
    out = np.clip(model.forward(frames, params).output.data, 0.0, 1.0)
    return float(np.mean([psnr(o, c) for o, c in zip(out, clean)]))


def train(cfg: TrainConfig, resume: bool = False, progress: Callable[[int, float], None] | None = None) -> Path:
    """Run the training loop; returns the checkpoint path.

    Every step draws its data from ``default_rng([seed, step])`` so a resumed
    run continues exactly where an uninterrupted one would be.
    """
    sampler = load_dataset(cfg.dataset, cfg.patch_size, cfg.channels)
    ckpt = Path(cfg.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    model = BurstDenoiser(cfg.architecture(), seed=cfg.seed)
    opt = AdamState(model.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon)
    start = 0
    rows: list[tuple] = []
    if resume and ckpt.exists():
        meta = json.loads(Path(f"{ckpt}.json").read_text())
        model.load_state_dict(checkpoint.load(ckpt))
        state = checkpoint.load(optimizer_path(ckpt))
        opt.step_count = int(state["step_count"][0])
        opt.first_moment = [state[f"m.{i}"] for i in range(len(opt.first_moment))]
        opt.second_moment = [state[f"v.{i}"] for i in range(len(opt.second_moment))]
        start = int(meta["step"])
        rows = [r for r in _read_csv(log_path(ckpt)) if r[0] <= start]
    probe = _probe_set(cfg, sampler)
    params = model.parameters()
    for step in range(start + 1, cfg.total_steps + 1):
        rng = np.random.default_rng([cfg.seed, step])
        frames, clean, noise = training_batch(sampler, cfg, rng)
        model.zero_grad()
        try:
            out = model.forward(frames, noise).output
            loss = l1_loss(out, clean)
            backward(loss)
            adam_step(params, opt)
        except NonFiniteError as exc:
            log.error("training aborted at step %d: %s", step, exc)
            _write_csv(log_path(ckpt), rows + [(step, float("nan"), None)])
            raise TrainingDiverged(step, str(exc)) from exc
        value = float(loss.item())
        probe_value = _probe_psnr(model, probe) if step % cfg.probe_every == 0 else None
        rows.append((step, value, probe_value))
        if progress is not None:
            progress(step, value)
        if step % cfg.checkpoint_every == 0 or step == cfg.total_steps:
            _save_state(model, opt, cfg, step, rows)
    if cfg.total_steps == 0 or start >= cfg.total_steps:
        _save_state(model, opt, cfg, max(start, cfg.total_steps), rows)
    return ckpt


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    level: str
    seed: int
    variant: str
    per_image: dict[str, float]
    baselines: dict[str, dict[str, float]]
    config: dict
    published_reference: dict = field(default_factory=lambda: PUBLISHED_REFERENCE)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(list(self.per_image.values())))

    def baseline_mean(self, name: str) -> float:
        return float(np.mean(list(self.baselines[name].values())))

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "level": self.level,
            "seed": self.seed,
            "mean_psnr": self.mean_psnr,
            "per_image": self.per_image,
            "baselines": {k: {"mean_psnr": self.baseline_mean(k), "per_image": v} for k, v in self.baselines.items()},
            "config": self.config,
            "published_reference": self.published_reference,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        names = list(self.per_image)
        width = max([len(n) for n in names] + [10])
        lines = [f"variant: {self.variant}   level: {self.level}   seed: {self.seed}",
                 f"{'image':<{width}}  {'model':>8}  {'noisy':>8}  {'mean-al':>8}"]
        for n in names:
            lines.append(f"{n:<{width}}  {self.per_image[n]:8.2f}  {self.baselines['noisy_reference'][n]:8.2f}"
                         f"  {self.baselines['mean_aligned'][n]:8.2f}")
        lines.append(f"{'mean':<{width}}  {self.mean_psnr:8.2f}  {self.baseline_mean('noisy_reference'):8.2f}"
                     f"  {self.baseline_mean('mean_aligned'):8.2f}")
        ref = self.published_reference
        lines.append(f"published full-scale reference, grayscale: lvl1 = {ref['grayscale']['lvl1']:.2f} / "
                     f"lvl2 = {ref['grayscale']['lvl2']:.2f} dB; color: lvl1 = {ref['color']['lvl1']:.2f} / "
                     f"lvl2 = {ref['color']['lvl2']:.2f} dB")
        return "\n".join(lines) + "\n"


def image_seed(name: str, seed: int) -> list[int]:
    """Per-image RNG seed: stable across runs and independent of dataset order."""
    digest = hashlib.sha256(name.encode()).digest()
    return [seed, int.from_bytes(digest[:8], "little")]


def mean_aligned(frames: np.ndarray) -> np.ndarray:
    """Baseline: align every frame to the reference and average."""
    return warp(frames, burst_flows(frames)).mean(axis=0)


def identity_model(frames: np.ndarray, params: NoiseParams) -> np.ndarray:
    """Stub predictor that returns the noisy reference frame."""
    return frames[0]


def evaluate(model: BurstDenoiser | Callable | str | os.PathLike, dataset: str | os.PathLike, level: str = "lvl1",
             seed: int = 0, burst_size: int | None = None, channels: int | None = None,
             max_shift: float = 4.0, variant: str | None = None) -> EvalReport:
    """Score a model on bursts synthesized from every image in ``dataset`` at a fixed noise level."""
    if level not in ("lvl1", "lvl2"):
        raise ValueError(f"level must be lvl1 or lvl2, got {level!r}")
    if isinstance(model, (str, os.PathLike)):
        model = BurstDenoiser.load(model)
    if isinstance(model, BurstDenoiser):
        burst_size = model.arch.burst_size
        channels = model.arch.channels
        predict = model.denoise
        if variant is None:
            a = model.arch
            flags = [n for n, on in (("no_prefilter", not a.prefilter), ("no_align", not a.align),
                                     ("no_adaptive_filter", not a.adaptive_filter)) if on]
            variant = "+".join(flags) if flags else "full"
    else:
        predict = model
        variant = variant or getattr(model, "__name__", "custom")
    burst_size = burst_size or 4
    channels = channels or 1
    paths = list_images(dataset)
    if not paths:
        raise ValueError(f"no images in {dataset}")
    params = sample_noise_params(np.random.default_rng(0), level)
    per_image, noisy, averaged = {}, {}, {}
    for path in paths:
        gt = conform_channels(load_image(path), channels)
        rng = np.random.default_rng(image_seed(path.name, seed))
        frames, gt = synthesize_interior(gt, burst_size, max_shift, params, rng, shift_margin(max_shift))
        pred = np.clip(np.asarray(predict(frames, params), dtype=np.float32), 0.0, 1.0)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} does not match ground truth {gt.shape}")
        per_image[path.name] = psnr(pred, gt)
        noisy[path.name] = psnr(frames[0], gt)
        averaged[path.name] = psnr(np.clip(mean_aligned(frames), 0.0, 1.0), gt)
    cfg = {"dataset": str(dataset), "burst_size": burst_size, "channels": channels, "max_shift": max_shift,
           "border": shift_margin(max_shift),
           "sigma_r": params.sigma_r, "sigma_s": params.sigma_s}
    return EvalReport(level, seed, variant, per_image, {"noisy_reference": noisy, "mean_aligned": averaged}, cfg)


def ablate(cfg: TrainConfig, variant: str, eval_dataset: str | os.PathLike, level: str = "lvl1",
           seed: int | None = None, progress: Callable[[int, float], None] | None = None) -> EvalReport:
    """Train one ablation variant from scratch and evaluate it."""
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    flags = {n: n == variant for n in VARIANTS[1:]}
    run = dataclasses.replace(cfg, **flags)
    ckpt = train(run, progress=progress)
    report = evaluate(ckpt, eval_dataset, level, cfg.seed if seed is None else seed,
                      max_shift=cfg.max_shift, variant=variant)
    report.config["training"] = run.to_dict()
    return report

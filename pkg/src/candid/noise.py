"""Heteroscedastic Gaussian noise and synthetic burst generation."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import check_image, load_image, save_image, shift_image

# log10 ranges used when drawing training noise
TRAIN_LOG_SIGMA_R = (-3.0, -1.5)
TRAIN_LOG_SIGMA_S = (-4.0, -2.0)
# (log10 sigma_r, log10 sigma_s) of the two evaluation levels
EVAL_LEVELS = {"lvl1": (-2.2, -2.6), "lvl2": (-1.8, -2.2)}
DEFAULT_MAX_SHIFT = 8.0


@dataclass(frozen=True)
class NoiseParams:
    """Readout std ``sigma_r`` and shot coefficient ``sigma_s`` on the [0, 1] scale."""

    sigma_r: float
    sigma_s: float

    def __post_init__(self):
        for name in ("sigma_r", "sigma_s"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")

    def variance(self, x):
        return self.sigma_r ** 2 + self.sigma_s ** 2 * x

    def std(self, x) -> np.ndarray:
        """Per-pixel noise std predicted from pixel values ``x``."""
        x = np.clip(np.asarray(x, dtype=np.float32), 0.0, None)
        return np.sqrt(np.float32(self.sigma_r ** 2) + np.float32(self.sigma_s ** 2) * x)

    @classmethod
    def from_log10(cls, log_r: float, log_s: float) -> "NoiseParams":
        return cls(10.0 ** log_r, 10.0 ** log_s)


def sample_noise_params(rng: np.random.Generator, mode: str = "train") -> NoiseParams:
    """Log-uniform draw for ``train``; fixed parameters for ``lvl1`` / ``lvl2``."""
    mode = mode.removeprefix("eval_")
    if mode in EVAL_LEVELS:
        return NoiseParams.from_log10(*EVAL_LEVELS[mode])
    if mode != "train":
        raise ValueError(f"unknown noise mode {mode!r}")
    log_r = rng.uniform(*TRAIN_LOG_SIGMA_R)
    log_s = rng.uniform(*TRAIN_LOG_SIGMA_S)
    return NoiseParams.from_log10(log_r, log_s)


def add_noise(img: np.ndarray, params: NoiseParams, rng: np.random.Generator) -> np.ndarray:
    """Add zero-mean Gaussian noise of variance ``sigma_r^2 + sigma_s^2 * x`` and clamp to [0, 1]."""
    img = np.asarray(img, dtype=np.float32)
    std = np.sqrt(params.variance(np.clip(img.astype(np.float64), 0.0, None)))
    noisy = img + std * rng.standard_normal(img.shape)
    return np.clip(noisy, 0.0, 1.0).astype(np.float32)


@dataclass
class SyntheticBurst:
    frames: np.ndarray  # (N, C, H, W), frame 0 is the reference
    params: NoiseParams
    true_shifts: list[tuple[float, float]]
    ground_truth: np.ndarray  # (C, H, W), aligned with frame 0
    seed: int | None = None
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[1:] != self.ground_truth.shape:
            raise ValueError("frames and ground truth dimensions disagree")
        if len(self.true_shifts) != len(self.frames) or tuple(self.true_shifts[0]) != (0.0, 0.0):
            raise ValueError("true_shifts must have one entry per frame, first (0, 0)")

    def __len__(self) -> int:
        return len(self.frames)


def synthesize_burst(gt: np.ndarray, n: int, max_shift: float, params: NoiseParams,
                     rng: np.random.Generator, integer_shifts: bool = False) -> SyntheticBurst:
    """Shift ``gt`` randomly for frames 1..n-1 and noise every frame independently."""
    gt = check_image(gt).astype(np.float32)
    if n < 1:
        raise ValueError(f"burst size must be >= 1, got {n}")
    if max_shift < 0:
        raise ValueError("max_shift must be non-negative")
    shifts = [(0.0, 0.0)]
    for _ in range(n - 1):
        dx, dy = rng.uniform(-max_shift, max_shift, size=2)
        if integer_shifts:
            dx, dy = np.round(dx), np.round(dy)
        shifts.append((float(dx), float(dy)))
    streams = rng.spawn(n)
    frames = []
    for (dx, dy), frame_rng in zip(shifts, streams):
        clean = gt if dx == 0 and dy == 0 else shift_image(gt, dx, dy)
        frames.append(add_noise(clean, params, frame_rng))
    return SyntheticBurst(np.stack(frames), params, shifts, gt)


# ---------------------------------------------------------------------------
# burst directories: frame_000.png ... gt.png meta.json


def frame_name(i: int) -> str:
    return f"frame_{i:03d}.png"


def save_burst(burst: SyntheticBurst, directory: str | os.PathLike) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(burst.frames):
        save_image(frame, directory / frame_name(i))
    save_image(burst.ground_truth, directory / "gt.png")
    meta = {
        "sigma_r": burst.params.sigma_r,
        "sigma_s": burst.params.sigma_s,
        "true_shifts": [list(s) for s in burst.true_shifts],
        "seed": burst.seed,
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_burst(directory: str | os.PathLike) -> SyntheticBurst:
    """Read a burst directory; ``gt.png`` is optional (ground truth is then ``None``)."""
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{meta_path} missing: noise parameters are required")
    meta = json.loads(meta_path.read_text())
    names = sorted(p.name for p in directory.glob("frame_*.png"))
    if not names:
        raise FileNotFoundError(f"no frame_*.png files in {directory}")
    frames = np.stack([load_image(directory / n) for n in names])
    params = NoiseParams(float(meta["sigma_r"]), float(meta["sigma_s"]))
    shifts = [tuple(float(v) for v in s) for s in meta.get("true_shifts") or []]
    if len(shifts) != len(names):
        shifts = [(0.0, 0.0)] * len(names)
    gt_path = directory / "gt.png"
    gt = load_image(gt_path) if gt_path.exists() else None
    burst = SyntheticBurst.__new__(SyntheticBurst)
    burst.frames, burst.params, burst.true_shifts = frames, params, shifts
    burst.ground_truth, burst.seed, burst.names = gt, meta.get("seed"), names
    if gt is not None:
        burst.__post_init__()
    return burst

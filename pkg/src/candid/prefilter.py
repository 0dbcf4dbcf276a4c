"""Single-frame pre-denoising into raw / mild / strong processing streams."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .imaging import load_image
from .noise import NoiseParams

STREAMS = ("raw", "mild", "strong")
# range std on the [0, 1] scale, from sigma 10 and 30 on the 8-bit scale
RANGE_SIGMA = {"mild": 10.0 / 255.0, "strong": 30.0 / 255.0}
WINDOW = 5
SPATIAL_SIGMA = 1.5

Denoiser = Callable[[np.ndarray, str], np.ndarray]


def bilateral(frames: np.ndarray, range_sigma: float, spatial_sigma: float = SPATIAL_SIGMA,
              window: int = WINDOW) -> np.ndarray:
    """Edge-preserving bilateral filter over the last two axes of ``(..., C, H, W)``.

    Range distance is the squared color difference summed over channels; borders
    clamp to the edge.
    """
    frames = np.asarray(frames, dtype=np.float32)
    r = window // 2
    h, w = frames.shape[-2:]
    pad = [(0, 0)] * (frames.ndim - 2) + [(r, r), (r, r)]
    padded = np.pad(frames, pad, mode="edge")
    num = np.zeros(frames.shape, dtype=np.float64)
    den = np.zeros(frames.shape[:-3] + (1,) + frames.shape[-2:], dtype=np.float64)
    inv_s = -0.5 / spatial_sigma ** 2
    inv_r = -0.5 / range_sigma ** 2
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            nb = padded[..., r + dy:r + dy + h, r + dx:r + dx + w]
            dist = ((nb - frames) ** 2).sum(axis=-3, keepdims=True, dtype=np.float64)
            wgt = np.exp(inv_s * (dx * dx + dy * dy) + inv_r * dist)
            num += wgt * nb
            den += wgt
    return (num / den).astype(np.float32)


def prefilter_frame(img: np.ndarray, strength: str) -> np.ndarray:
    """Built-in denoiser: bilateral filter at ``mild`` or ``strong`` range strength."""
    if strength not in RANGE_SIGMA:
        raise ValueError(f"strength must be 'mild' or 'strong', got {strength!r}")
    return bilateral(img, RANGE_SIGMA[strength])


@dataclass
class StreamSet:
    """Raw, mildly and strongly pre-denoised copies of one burst, each ``(N, C, H, W)``."""

    raw: np.ndarray
    mild: np.ndarray
    strong: np.ndarray
    params: NoiseParams | None = None

    def __post_init__(self):
        if not (self.raw.shape == self.mild.shape == self.strong.shape):
            raise ValueError("streams must share frame count and dimensions")

    def __getitem__(self, label: str) -> np.ndarray:
        if label not in STREAMS:
            raise KeyError(label)
        return getattr(self, label)

    def stacked(self, labels=STREAMS) -> np.ndarray:
        """``(S, N, C, H, W)`` array of the requested streams."""
        return np.stack([self[s] for s in labels])


def make_streams(burst: np.ndarray, params: NoiseParams | None = None,
                 denoiser: Denoiser | None = None) -> StreamSet:
    """Duplicate ``burst`` into the three streams. Outputs are plain arrays (no gradient)."""
    burst = np.asarray(burst)
    if burst.ndim != 4 or len(burst) == 0:
        raise ValueError("make_streams needs a non-empty (N, C, H, W) burst")
    if denoiser is None:
        mild = bilateral(burst, RANGE_SIGMA["mild"])
        strong = bilateral(burst, RANGE_SIGMA["strong"])
    else:
        mild = np.stack([np.asarray(denoiser(f, "mild"), dtype=np.float32) for f in burst])
        strong = np.stack([np.asarray(denoiser(f, "strong"), dtype=np.float32) for f in burst])
    return StreamSet(burst, mild, strong, params)


def load_prefiltered(burst: np.ndarray, names: list[str], directory: str | os.PathLike,
                     params: NoiseParams | None = None) -> StreamSet:
    """Use externally denoised frames from ``directory/mild`` and ``directory/strong``."""
    directory = Path(directory)
    out = {}
    for label in ("mild", "strong"):
        frames = []
        for name in names:
            path = directory / label / name
            if not path.exists():
                raise FileNotFoundError(f"prefiltered frame {path} missing")
            frames.append(load_image(path))
        out[label] = np.stack(frames)
        if out[label].shape != burst.shape:
            raise ValueError(f"{directory / label} frames do not match the burst dimensions")
    return StreamSet(np.asarray(burst), out["mild"], out["strong"], params)

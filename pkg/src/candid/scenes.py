"""Procedural clean images for desk-scale training and tests.

``dead_leaves`` stacks random occluding disks with smooth shading, which gives
the piecewise-smooth, scale-invariant statistics of natural photographs.
``pink_noise`` is a 1/f texture for flow experiments.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .imaging import save_image


def pink_noise(rng: np.random.Generator, size: int, exponent: float = 1.0, channels: int = 1) -> np.ndarray:
    """Random field with power spectrum ~ 1/f^(2*exponent), rescaled to [0.05, 0.95]."""
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.rfftfreq(size)[None, :]
    f = np.sqrt(fx ** 2 + fy ** 2)
    f[0, 0] = 1.0
    amp = f ** -exponent
    amp[0, 0] = 0.0
    out = []
    for _ in range(channels):
        spectrum = amp * (rng.standard_normal(amp.shape) + 1j * rng.standard_normal(amp.shape))
        field = np.fft.irfft2(spectrum, s=(size, size))
        field = (field - field.min()) / (field.max() - field.min())
        out.append(0.05 + 0.9 * field)
    return np.stack(out).astype(np.float32)


def dead_leaves(rng: np.random.Generator, size: int, channels: int = 1, n_disks: int | None = None,
                r_min: float = 6.0, r_max: float | None = None, supersample: int = 2) -> np.ndarray:
    """Occluding disks with power-law radii, each shaded by a faint linear gradient.

    Rendered at ``supersample`` times the resolution and box-downsampled, so
    edges are antialiased like an optical image. Radii are in output pixels.
    """
    if n_disks is None:
        n_disks = max(1, int(round(100 * (size / 96.0) ** 2)))
    if r_max is None:
        r_max = size / 2.0
    ss = supersample
    big = size * ss
    ys, xs = np.mgrid[0:big, 0:big].astype(np.float64)
    img = np.empty((channels, big, big))
    base = rng.uniform(0.1, 0.9, size=channels)
    img[:] = base[:, None, None]
    # radius density ~ r^-3 via inverse CDF
    u = rng.uniform(size=n_disks)
    radii = ss / np.sqrt(u / r_min ** 2 + (1 - u) / r_max ** 2)
    radii = np.sort(radii)[::-1]
    for r in radii:
        cx, cy = rng.uniform(-r, big + r, size=2)
        mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
        if not mask.any():
            continue
        color = rng.uniform(0.05, 0.95, size=channels)
        gx, gy = rng.normal(0.0, 0.15 / max(r, 1.0), size=2)
        shade = gx * (xs - cx) + gy * (ys - cy)
        for c in range(channels):
            img[c][mask] = np.clip(color[c] + shade[mask], 0.0, 1.0)
    img = img.reshape(channels, size, ss, size, ss).mean(axis=(2, 4))
    return img.astype(np.float32)


def write_scene_set(directory: str | os.PathLike, count: int, size: int, seed: int,
                    channels: int = 1, prefix: str = "scene") -> list[Path]:
    """Write ``count`` dead-leaves PNGs; deterministic in ``seed``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, child in enumerate(np.random.default_rng(seed).spawn(count)):
        path = directory / f"{prefix}_{i:03d}.png"
        save_image(dead_leaves(child, size, channels), path)
        paths.append(path)
    return paths

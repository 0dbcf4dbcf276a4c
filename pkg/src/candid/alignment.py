"""Dense flow from the reference frame to secondary frames, and backward warping.

A flow field is an ``(H, W, 2)`` float array of (dx, dy) in pixels: reference
pixel (x, y) corresponds to (x + dx, y + dy) in the secondary frame.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numba
import numpy as np
from scipy.ndimage import correlate1d, median_filter, uniform_filter

from .imaging import bilinear_taps, luminance, sample_bilinear
from .tensor import Tensor

FLO_MAGIC = 202021.25


@dataclass(frozen=True)
class LKConfig:
    levels: int = 3
    window: int = 5
    iterations: int = 10
    epsilon: float = 1e-4
    # minimum structure-tensor eigenvalue (window sum) for a local update
    min_eigenvalue: float = 1e-3
    # minimum eigenvalue ratio; rejects edge-like (aperture-limited) windows
    min_conditioning: float = 0.05
    # per-iteration update clamp, pixels
    max_step: float = 1.0
    # median filter size applied to the flow after each level (0 disables)
    median: int = 3


DEFAULT_LK = LKConfig()
_BINOMIAL = np.array([1, 4, 6, 4, 1], dtype=np.float64) / 16.0


def _filter_sep(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable correlation over the last two axes with clamp-to-edge borders."""
    out = correlate1d(img, taps, axis=-2, mode="nearest")
    return correlate1d(out, taps, axis=-1, mode="nearest")


def _box_sum(img: np.ndarray, size: int) -> np.ndarray:
    window = (1,) * (img.ndim - 2) + (size, size)
    return uniform_filter(img, size=window, mode="nearest") * float(size * size)


def _pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    out = [img]
    for _ in range(levels - 1):
        prev = out[-1]
        if min(prev.shape[-2:]) < 8:
            break
        out.append(_filter_sep(prev, _BINOMIAL)[..., ::2, ::2])
    return out


def _gradients(img: np.ndarray):
    gy, gx = np.gradient(img, axis=(-2, -1))
    return gx, gy


def _upsample_flow(flow: np.ndarray, h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    u = sample_bilinear(flow[..., 0], xs / 2.0, ys / 2.0)
    v = sample_bilinear(flow[..., 1], xs / 2.0, ys / 2.0)
    return 2.0 * np.stack([u, v], axis=-1)


@numba.njit(cache=True, inline="always")
def _bilinear(img, x, y):
    h, w = img.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    fx = x - x0
    fy = y - y0
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    return ((1 - fx) * (1 - fy) * img[y0, x0] + fx * (1 - fy) * img[y0, x1]
            + (1 - fx) * fy * img[y1, x0] + fx * fy * img[y1, x1])


@numba.njit(cache=True)
def _box_sum_nb(src, win, out):
    # clamp-to-edge window sums of every plane of src (K, H, W)
    k, h, w = src.shape
    r = win // 2
    tmp = np.empty((h, w))
    for c in range(k):
        for y in range(h):
            for x in range(w):
                acc = 0.0
                for d in range(-r, r + 1):
                    acc += src[c, y, min(max(x + d, 0), w - 1)]
                tmp[y, x] = acc
        for y in range(h):
            for x in range(w):
                acc = 0.0
                for d in range(-r, r + 1):
                    acc += tmp[min(max(y + d, 0), h - 1), x]
                out[c, y, x] = acc


@numba.njit(cache=True)
def _lk_refine(ref, sec, ix, iy, sx, sy, valid, u, v, iterations, win, eps, max_step):
    """Iterate the linearized window solve in place on one pyramid level of one pair."""
    h, w = ref.shape
    terms = np.empty((5, h, w))
    sums = np.empty((5, h, w))
    for _ in range(iterations):
        for y in range(h):
            for x in range(w):
                px = x + u[y, x]
                py = y + v[y, x]
                it = _bilinear(sec, px, py) - ref[y, x]
                # symmetric gradient: fixed point is the least-squares minimum
                gx = 0.5 * (ix[y, x] + _bilinear(sx, px, py))
                gy = 0.5 * (iy[y, x] + _bilinear(sy, px, py))
                gxx = gx * gx
                gxy = gx * gy
                gyy = gy * gy
                terms[0, y, x] = gxx
                terms[1, y, x] = gxy
                terms[2, y, x] = gyy
                # window residual re-expressed at the centre pixel's flow, to first order
                terms[3, y, x] = gxx * u[y, x] + gxy * v[y, x] - gx * it
                terms[4, y, x] = gxy * u[y, x] + gyy * v[y, x] - gy * it
        _box_sum_nb(terms, win, sums)
        for y in range(h):
            for x in range(w):
                if not valid[y, x]:
                    continue
                a = sums[0, y, x] + eps
                b = sums[1, y, x]
                c = sums[2, y, x] + eps
                rx = sums[3, y, x] + eps * u[y, x]
                ry = sums[4, y, x] + eps * v[y, x]
                det = a * c - b * b
                du = min(max((c * rx - b * ry) / det - u[y, x], -max_step), max_step)
                dv = min(max((a * ry - b * rx) / det - v[y, x], -max_step), max_step)
                # samples never leave the frame; stops border pixels drifting outward
                u[y, x] = min(max(u[y, x] + du, -x), (w - 1) - x)
                v[y, x] = min(max(v[y, x] + dv, -y), (h - 1) - y)


def estimate_flow_batch(refs: np.ndarray, secs: np.ndarray, config: LKConfig = DEFAULT_LK) -> np.ndarray:
    """Pyramidal Lucas-Kanade on ``(B, H, W)`` grayscale pairs, returning ``(B, H, W, 2)``.

    Where the windowed structure tensor is near-singular, the update is skipped
    and the coarser level's estimate is kept (zero at the coarsest level).
    """
    refs = np.asarray(refs, dtype=np.float64)
    secs = np.asarray(secs, dtype=np.float64)
    if refs.shape != secs.shape:
        raise ValueError(f"reference {refs.shape} and secondary {secs.shape} dimensions differ")
    squeeze = refs.ndim == 2
    if squeeze:
        refs, secs = refs[None], secs[None]
    win = config.window
    ref_pyr = _pyramid(refs, config.levels)
    sec_pyr = _pyramid(secs, config.levels)
    flow = None
    for ref, sec in zip(reversed(ref_pyr), reversed(sec_pyr)):
        h, w = ref.shape[-2:]
        # suppress near-Nyquist content that breaks the linearization
        ref = _filter_sep(ref, _BINOMIAL)
        sec = _filter_sep(sec, _BINOMIAL)
        if flow is None:
            u = np.zeros(ref.shape)
            v = np.zeros(ref.shape)
        else:
            up = _upsample_flow(flow, h, w)
            u, v = up[..., 0].copy(), up[..., 1].copy()
        ix, iy = _gradients(ref)
        sx, sy = _gradients(sec)
        a = _box_sum(ix * ix, win)
        b = _box_sum(ix * iy, win)
        c = _box_sum(iy * iy, win)
        spread = np.sqrt(0.25 * (a - c) ** 2 + b * b)
        lam_min = 0.5 * (a + c) - spread
        lam_max = 0.5 * (a + c) + spread
        valid = (lam_min > config.min_eigenvalue) & (lam_min > config.min_conditioning * lam_max)
        for i in range(len(ref)):
            _lk_refine(ref[i], sec[i], ix[i], iy[i], sx[i], sy[i], valid[i], u[i], v[i],
                       config.iterations, win, config.epsilon, config.max_step)
        if config.median:
            size = (1, config.median, config.median)
            u = median_filter(u, size=size, mode="nearest")
            v = median_filter(v, size=size, mode="nearest")
        flow = np.stack([u, v], axis=-1)
    flow = flow.astype(np.float32)
    return flow[0] if squeeze else flow


def estimate_flow(reference: np.ndarray, secondary: np.ndarray, config: LKConfig = DEFAULT_LK) -> np.ndarray:
    """Flow field ``(H, W, 2)`` from a ``(C, H, W)`` reference to a secondary frame."""
    reference = np.asarray(reference)
    secondary = np.asarray(secondary)
    if reference.shape != secondary.shape:
        raise ValueError(f"frame dimensions differ: {reference.shape} vs {secondary.shape}")
    return estimate_flow_batch(luminance(reference)[None], luminance(secondary)[None], config)[0]


def burst_flows(frames: np.ndarray, config: LKConfig = DEFAULT_LK) -> np.ndarray:
    """Flows for every frame of ``(..., N, C, H, W)`` relative to frame 0; frame 0 gets zero flow."""
    frames = np.asarray(frames)
    gray = luminance(frames)
    lead = gray.shape[:-3]
    n, h, w = gray.shape[-3:]
    out = np.zeros(lead + (n, h, w, 2), dtype=np.float32)
    if n > 1:
        refs = np.broadcast_to(gray[..., :1, :, :], lead + (n - 1, h, w)).reshape(-1, h, w)
        secs = gray[..., 1:, :, :].reshape(-1, h, w)
        out[..., 1:, :, :, :] = estimate_flow_batch(refs, secs, config).reshape(lead + (n - 1, h, w, 2))
    return out


# ---------------------------------------------------------------------------
# warping


def _warp_taps(flow: np.ndarray, h: int, w: int):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    idx, wts = bilinear_taps(xs + flow[..., 0], ys + flow[..., 1], h, w)
    lin = [(idx[2 * k] * w + idx[2 * k + 1]).reshape(-1, h * w) for k in range(4)]
    wts = [wk.reshape(-1, h * w) for wk in wts]
    return lin, wts


def _gather(flat: np.ndarray, lin, wts, dtype) -> np.ndarray:
    # flat: (L, C, HW); lin/wts: (L, HW)
    out = np.zeros(flat.shape, dtype=np.float64)
    for li, wk in zip(lin, wts):
        out += wk[:, None, :] * np.take_along_axis(flat, li[:, None, :], axis=2)
    return out.astype(dtype)


def warp(data, flow: np.ndarray):
    """Backward-warp ``(..., C, H, W)`` data by ``(..., H, W, 2)`` flow with bilinear sampling.

    Accepts a numpy array or a :class:`Tensor`; for tensors the result is
    differentiable with respect to ``data`` (the flow is a constant).
    """
    arr = data.data if isinstance(data, Tensor) else np.asarray(data)
    flow = np.asarray(flow)
    if arr.ndim < 3:
        raise ValueError("warp data must be (..., C, H, W)")
    c, h, w = arr.shape[-3:]
    if flow.shape[-3:] != (h, w, 2):
        raise ValueError(f"flow {flow.shape} does not match data spatial dims {(h, w)}")
    lead = np.broadcast_shapes(arr.shape[:-3], flow.shape[:-3])
    arr_b = np.broadcast_to(arr, lead + (c, h, w))
    flow_b = np.broadcast_to(flow, lead + (h, w, 2))
    flat = arr_b.reshape(-1, c, h * w)
    lin, wts = _warp_taps(flow_b, h, w)
    out = _gather(flat, lin, wts, arr.dtype).reshape(lead + (c, h, w))
    if not isinstance(data, Tensor):
        return out
    if arr_b.shape != arr.shape:
        raise ValueError("tensor warp does not broadcast data over flow batch")

    def back(g):
        g = g.reshape(-1, c, h * w).astype(np.float64)
        n_l = g.shape[0]
        base = (np.arange(n_l * c).reshape(n_l, c, 1) * (h * w))
        acc = np.zeros(n_l * c * h * w)
        for li, wk in zip(lin, wts):
            idx = (base + li[:, None, :]).ravel()
            acc += np.bincount(idx, weights=(g * wk[:, None, :]).ravel(), minlength=acc.size)
        return (acc.reshape(arr.shape).astype(arr.dtype),)

    return Tensor._from_op(out, (data,), back, "warp")


def align_stream(frames: np.ndarray, features, flows: np.ndarray | None = None,
                 config: LKConfig = DEFAULT_LK):
    """Warp secondary frames and their feature maps into the reference geometry.

    ``frames`` is ``(N, C, H, W)``; ``features`` is an ``(N, F, H, W)`` tensor or
    array, or a list of ``N`` per-frame ``(F, H, W)`` maps. Flow is estimated on
    ``frames`` unless ``flows`` ``(N, H, W, 2)`` is given. Returns
    ``(aligned_frames, aligned_features, flows)``.
    """
    frames = np.asarray(frames)
    if isinstance(features, (list, tuple)):
        if len(features) != len(frames):
            raise ValueError(f"{len(frames)} frames but {len(features)} feature maps")
        if all(isinstance(f, Tensor) for f in features):
            from .tensor import stack

            features = stack(features, axis=0)
        else:
            features = np.stack([np.asarray(f) for f in features])
    if features.shape[0] != frames.shape[0]:
        raise ValueError(f"{len(frames)} frames but {features.shape[0]} feature maps")
    if features.shape[-2:] != frames.shape[-2:]:
        raise ValueError("feature maps must match frame spatial dims")
    if flows is None:
        flows = burst_flows(frames, config)
    aligned = warp(frames, flows)
    aligned[0] = frames[0]
    return aligned, warp(features, flows), flows


# ---------------------------------------------------------------------------
# Middlebury .flo


def write_flo(path: str | os.PathLike, flow: np.ndarray) -> None:
    from .checkpoint import atomic_write

    flow = np.asarray(flow, dtype="<f4")
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    atomic_write(path, struct.pack("<fii", FLO_MAGIC, w, h) + flow.tobytes())


def read_flo(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise OSError(f"{path}: truncated .flo header")
    magic, w, h = struct.unpack_from("<fii", raw, 0)
    if magic != FLO_MAGIC:
        raise OSError(f"{path}: bad .flo magic {magic}")
    if w <= 0 or h <= 0:
        raise OSError(f"{path}: invalid .flo size {w}x{h}")
    need = 8 * w * h
    if len(raw) - 12 < need:
        raise OSError(f"{path}: truncated .flo data")
    flow = np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    if not np.isfinite(flow).all():
        raise OSError(f"{path}: non-finite flow values")
    return flow.astype(np.float32)


def load_flow_dir(directory: str | os.PathLike, n: int, h: int, w: int) -> np.ndarray:
    """Read ``flow_001.flo`` .. ``flow_{n-1}.flo``; frame 0 gets zero flow."""
    directory = Path(directory)
    flows = np.zeros((n, h, w, 2), dtype=np.float32)
    for i in range(1, n):
        f = read_flo(directory / f"flow_{i:03d}.flo")
        if f.shape != (h, w, 2):
            raise ValueError(f"flow_{i:03d}.flo is {f.shape[:2]}, frames are {(h, w)}")
        flows[i] = f
    return flows


def save_flow_dir(directory: str | os.PathLike, flows: Sequence[np.ndarray]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(flows):
        if i:
            write_flo(directory / f"flow_{i:03d}.flo", f)

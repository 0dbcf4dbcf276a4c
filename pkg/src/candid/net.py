"""Trainable burst denoiser: shared feature CNN, per-pixel kernels, fusion.

Data layout: a batch of bursts is ``(B, N, C, H, W)``; streams add an axis,
``(B, S, N, C, H, W)`` with S = 3 (raw, mild, strong) or 1 when pre-filtering
is disabled. Filtered images from all streams are fused, so ``M = S * N``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .alignment import burst_flows, warp
from .noise import NoiseParams
from .prefilter import RANGE_SIGMA, bilateral
from .tensor import Tensor, concat, conv2d, get_default_dtype, relu, softmax, sum_

KERNEL_SIZES = (3, 5)


class ArchitectureMismatch(ValueError):
    """Checkpoint tensors do not fit the requested architecture."""


@dataclass(frozen=True)
class ArchConfig:
    channels: int = 1
    burst_size: int = 4
    feature_channels: int = 8
    feature_hidden: int = 16
    kernel_hidden: int = 64
    fusion_hidden: int = 64
    prefilter: bool = True
    align: bool = True
    adaptive_filter: bool = True

    @property
    def streams(self) -> int:
        return 3 if self.prefilter else 1

    @property
    def fused_images(self) -> int:
        return self.streams * self.burst_size

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        """Canonical parameter names and shapes."""
        c, n, f = self.channels, self.burst_size, self.feature_channels
        kk = sum(k * k for k in KERNEL_SIZES)
        layers = {}
        feat = [c + 1, self.feature_hidden, self.feature_hidden, f]
        for i in range(3):
            layers[f"features.conv{i}"] = (feat[i + 1], feat[i])
        if self.adaptive_filter:
            ker = [n * f, self.kernel_hidden, self.kernel_hidden, self.kernel_hidden, n * kk]
            for i in range(4):
                layers[f"kernels.conv{i}"] = (ker[i + 1], ker[i])
        m = self.fused_images
        fus = [m * f + m * c, self.fusion_hidden, self.fusion_hidden, self.fusion_hidden, m * c]
        for i in range(4):
            layers[f"fusion.conv{i}"] = (fus[i + 1], fus[i])
        shapes = {}
        for name, (cout, cin) in layers.items():
            shapes[f"{name}.w"] = (cout, cin, 3, 3)
            shapes[f"{name}.b"] = (cout,)
        return shapes


# ---------------------------------------------------------------------------
# parameter-free ops


def _fold_edge_pad(g: np.ndarray, r: int) -> np.ndarray:
    """Gradient of clamp-to-edge padding by ``r`` on the last two axes."""
    if r == 0:
        return g
    core = g[..., r:-r, :].copy()
    core[..., 0, :] += g[..., :r, :].sum(axis=-2)
    core[..., -1, :] += g[..., -r:, :].sum(axis=-2)
    out = core[..., :, r:-r].copy()
    out[..., :, 0] += core[..., :, :r].sum(axis=-1)
    out[..., :, -1] += core[..., :, -r:].sum(axis=-1)
    return out


def apply_kernels(images, kernels: Tensor) -> Tensor:
    """Per-pixel weighted sum of each image's k x k neighbourhood (clamp-to-edge).

    ``images`` is ``(..., N, C, H, W)`` (array or tensor); ``kernels`` is
    ``(..., N, H, W, k, k)``. Every channel of a pixel uses that pixel's kernel.
    """
    img_t = images if isinstance(images, Tensor) else Tensor(images, dtype=kernels.dtype)
    img = img_t.data
    kd = kernels.data
    if kd.ndim < 5 or kd.shape[-1] != kd.shape[-2] or kd.shape[-1] % 2 == 0:
        raise ValueError(f"kernels must be (..., N, H, W, k, k) with odd k, got {kd.shape}")
    k = kd.shape[-1]
    if img.ndim != kd.ndim - 1 or img.shape[:-3] != kd.shape[:-4] or img.shape[-2:] != kd.shape[-4:-2]:
        raise ValueError(f"kernel volume {kd.shape} does not match images {img.shape}")
    lead = img.shape[:-3]
    c, h, w = img.shape[-3:]
    r = k // 2
    x = img.reshape((-1, c, h, w))
    kern = kd.reshape((-1, h, w, k * k)).transpose(0, 3, 1, 2)  # (L, kk, H, W)
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
    out = np.zeros(x.shape, dtype=np.result_type(x.dtype, kern.dtype))
    for i in range(k):
        for j in range(k):
            out += kern[:, None, i * k + j] * xp[:, :, i:i + h, j:j + w]

    def back(g):
        g = g.reshape(x.shape)
        gk = None
        if kernels.requires_grad:
            gk = np.empty((x.shape[0], k * k, h, w), dtype=kd.dtype)
            for i in range(k):
                for j in range(k):
                    gk[:, i * k + j] = (g * xp[:, :, i:i + h, j:j + w]).sum(axis=1)
            gk = gk.transpose(0, 2, 3, 1).reshape(kd.shape)
        gi = None
        if img_t.requires_grad:
            gp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gp[:, :, i:i + h, j:j + w] += kern[:, None, i * k + j] * g
            gi = _fold_edge_pad(gp, r).reshape(img.shape)
        return gi, gk

    return Tensor._from_op(out.reshape(lead + (c, h, w)), (img_t, kernels), back, "apply_kernels")


def noise_channel(frames: np.ndarray, params: NoiseParams) -> np.ndarray:
    """Per-pixel noise std ``sqrt(sigma_r^2 + sigma_s^2 * y)`` from observed ``(..., C, H, W)`` frames."""
    y = frames.mean(axis=-3, keepdims=True)
    return params.std(y).astype(frames.dtype)


def build_streams(bursts: np.ndarray, prefilter: bool = True) -> np.ndarray:
    """``(B, N, C, H, W)`` bursts to ``(B, S, N, C, H, W)`` raw/mild/strong streams."""
    bursts = np.asarray(bursts, dtype=np.float32)
    if not prefilter:
        return bursts[:, None]
    mild = bilateral(bursts, RANGE_SIGMA["mild"])
    strong = bilateral(bursts, RANGE_SIGMA["strong"])
    return np.stack([bursts, mild, strong], axis=1)


# ---------------------------------------------------------------------------
# model


@dataclass
class ForwardResult:
    output: Tensor  # (B, C, H, W)
    kernels: list[Tensor]  # each (B*S, N, H, W, k, k)
    weights: Tensor  # (B, M, C, H, W)
    filtered: Tensor  # (B, M, C, H, W)


class BurstDenoiser:
    """Holds the trainable weights and runs the end-to-end forward pass."""

    def __init__(self, arch: ArchConfig = ArchConfig(), seed: int = 0):
        self.arch = arch
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        dtype = get_default_dtype()
        for name, shape in arch.layer_shapes().items():
            final = name.startswith(("kernels.conv3", "fusion.conv3"))
            if name.endswith(".b") or final:
                data = np.zeros(shape)
            else:
                fan_in = shape[1] * shape[2] * shape[3]
                bound = np.sqrt(6.0 / fan_in)
                data = rng.uniform(-bound, bound, size=shape)
            self.params[name] = Tensor(data, requires_grad=True, dtype=dtype, name=name)

    # -- parameters ------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = self.arch.layer_shapes()
        if set(state) != set(expected):
            missing = sorted(set(expected) - set(state))
            extra = sorted(set(state) - set(expected))
            raise ArchitectureMismatch(f"checkpoint names disagree (missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            if tuple(state[name].shape) != shape:
                raise ArchitectureMismatch(f"{name}: checkpoint {tuple(state[name].shape)} vs model {shape}")
        for name, p in self.params.items():
            p.data = np.array(state[name], dtype=p.dtype)
            p.grad = None

    def save(self, path: str | os.PathLike, extra: dict | None = None) -> None:
        """Write weights to ``path`` and the architecture to ``path + '.json'``."""
        checkpoint.save(path, self.state_dict())
        meta = {"arch": asdict(self.arch)}
        if extra:
            meta.update(extra)
        checkpoint.atomic_write(f"{os.fspath(path)}.json", (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())

    @classmethod
    def load(cls, path: str | os.PathLike, arch: ArchConfig | None = None) -> "BurstDenoiser":
        state = checkpoint.load(path)
        if arch is None:
            side = Path(f"{os.fspath(path)}.json")
            if side.exists():
                meta = json.loads(side.read_text())
                known = {f.name for f in fields(ArchConfig)}
                arch = ArchConfig(**{k: v for k, v in meta["arch"].items() if k in known})
            else:
                arch = infer_arch(state)
        model = cls(arch)
        model.load_state_dict(state)
        return model

    # -- blocks ----------------------------------------------------------
    @staticmethod
    def _conv_stack(x: Tensor, params: dict[str, Tensor], prefix: str, layers: int) -> Tensor:
        for i in range(layers):
            x = conv2d(x, params[f"{prefix}.conv{i}.w"], params[f"{prefix}.conv{i}.b"])
            if i < layers - 1:
                x = relu(x)
        return x

    def extract_features(self, frames: np.ndarray, params: NoiseParams | Sequence[NoiseParams]) -> Tensor:
        """``(..., C, H, W)`` frames (plus a noise channel) to ``(..., F, H, W)`` features.

        With a sequence of noise parameters, entry ``i`` applies to ``frames[i]``.
        """
        frames = np.asarray(frames, dtype=get_default_dtype())
        if frames.shape[-3] != self.arch.channels:
            raise ValueError(f"model expects {self.arch.channels} channels, got {frames.shape[-3]}")
        if isinstance(params, NoiseParams):
            sigma = noise_channel(frames, params)
        else:
            if len(params) != len(frames):
                raise ValueError("need one NoiseParams per leading entry")
            sigma = np.stack([noise_channel(f, p) for f, p in zip(frames, params)])
        lead = frames.shape[:-3]
        h, w = frames.shape[-2:]
        x = np.concatenate([frames, sigma], axis=-3).reshape((-1, self.arch.channels + 1, h, w))
        out = self._conv_stack(Tensor(x, dtype=x.dtype), self.params, "features", 3)
        return out.reshape(lead + (self.arch.feature_channels, h, w))

    def predict_kernels(self, aligned_features: Tensor) -> tuple[Tensor, Tensor]:
        """``(..., N, F, H, W)`` aligned features of one stream to ``[..., N, H, W, 3, 3]`` and ``[..., N, H, W, 5, 5]``."""
        if not self.arch.adaptive_filter:
            raise RuntimeError("model was built without the adaptive filter")
        shape = aligned_features.shape
        n, f, h, w = shape[-4:]
        if n != self.arch.burst_size or f != self.arch.feature_channels:
            raise ValueError(f"expected (N={self.arch.burst_size}, F={self.arch.feature_channels}) features, got {shape}")
        lead = shape[:-4]
        x = aligned_features.reshape((-1, n * f, h, w))
        logits = self._conv_stack(x, self.params, "kernels", 4)
        out = []
        start = 0
        for k in KERNEL_SIZES:
            part = logits[:, start:start + n * k * k].reshape((-1, n, k * k, h, w))
            start += n * k * k
            kern = softmax(part, axis=2).transpose((0, 1, 3, 4, 2))
            out.append(kern.reshape(lead + (n, h, w, k, k)))
        return out[0], out[1]

    def fuse(self, filtered, aligned_features: Tensor) -> tuple[Tensor, Tensor]:
        """Fuse ``(B, M, C, H, W)`` filtered images using ``(B, S*N*F, H, W)`` features.

        Returns the ``(B, C, H, W)`` output and the softmax weight volume.
        """
        filt = filtered if isinstance(filtered, Tensor) else Tensor(filtered)
        b, m, c, h, w = filt.shape
        if m != self.arch.fused_images or c != self.arch.channels:
            raise ValueError(f"expected M={self.arch.fused_images}, C={self.arch.channels}; got {filt.shape}")
        if aligned_features.shape[0] != b or aligned_features.shape[-2:] != (h, w):
            raise ValueError("features and filtered images disagree in batch or spatial dims")
        x = concat([aligned_features, filt.reshape((b, m * c, h, w))], axis=1)
        logits = self._conv_stack(x, self.params, "fusion", 4).reshape((b, m, c, h, w))
        weights = softmax(logits, axis=1)
        return sum_(weights * filt, axis=1), weights

    # -- end to end ------------------------------------------------------
    def forward(self, bursts: np.ndarray, params: NoiseParams | Sequence[NoiseParams],
                streams: np.ndarray | None = None, flows: np.ndarray | None = None) -> ForwardResult:
        """Denoise a ``(B, N, C, H, W)`` batch (or a single ``(N, C, H, W)`` burst).

        ``streams`` overrides the built-in pre-filter with ``(B, S, N, C, H, W)``
        arrays; ``flows`` overrides flow estimation with ``(B, [S|1], N, H, W, 2)``.
        """
        arch = self.arch
        bursts = np.asarray(bursts, dtype=get_default_dtype())
        single = bursts.ndim == 4
        if single:
            bursts = bursts[None]
            streams = None if streams is None else np.asarray(streams)[None]
            flows = None if flows is None else np.asarray(flows)[None]
        bsz, n, c, h, w = bursts.shape
        if n != arch.burst_size:
            raise ValueError(f"model was built for bursts of {arch.burst_size} frames, got {n}")
        plist = [params] * bsz if isinstance(params, NoiseParams) else list(params)
        if len(plist) != bsz:
            raise ValueError("need one NoiseParams per burst")
        if streams is None:
            streams = build_streams(bursts, arch.prefilter)
        streams = np.asarray(streams, dtype=bursts.dtype)
        s = arch.streams
        if streams.shape != (bsz, s, n, c, h, w):
            raise ValueError(f"streams must be {(bsz, s, n, c, h, w)}, got {streams.shape}")

        if not arch.align:
            flows = np.zeros((bsz, 1, n, h, w, 2), dtype=np.float32)
        elif flows is None:
            flows = burst_flows(streams)
        flows = np.broadcast_to(np.asarray(flows, dtype=np.float32), (bsz, s, n, h, w, 2))

        feats = self.extract_features(
            streams.reshape(bsz, s * n, c, h, w), plist
        ).reshape((bsz * s * n, arch.feature_channels, h, w))
        flat_flows = flows.reshape(bsz * s * n, h, w, 2)
        aligned_feats = warp(feats, flat_flows)
        aligned_imgs = warp(streams.reshape(bsz * s * n, c, h, w), flat_flows)

        kernels: list[Tensor] = []
        if arch.adaptive_filter:
            k3, k5 = self.predict_kernels(aligned_feats.reshape((bsz * s, n, arch.feature_channels, h, w)))
            kernels = [k3, k5]
            imgs = aligned_imgs.reshape(bsz * s, n, c, h, w)
            filtered = (apply_kernels(imgs, k3) + apply_kernels(imgs, k5)) * 0.5
        else:
            filtered = Tensor(aligned_imgs, dtype=aligned_imgs.dtype)
        filtered = filtered.reshape((bsz, s * n, c, h, w))
        out, weights = self.fuse(filtered, aligned_feats.reshape((bsz, s * n * arch.feature_channels, h, w)))
        if single:
            out = out.reshape((c, h, w))
        return ForwardResult(out, kernels, weights, filtered)

    def denoise(self, burst: np.ndarray, params: NoiseParams, streams: np.ndarray | None = None,
                flows: np.ndarray | None = None) -> np.ndarray:
        """Convenience wrapper: one ``(N, C, H, W)`` burst in, a clipped ``(C, H, W)`` image out."""
        res = self.forward(burst, params, streams=streams, flows=flows)
        return np.clip(res.output.data, 0.0, 1.0).astype(np.float32)


def infer_arch(state: dict[str, np.ndarray]) -> ArchConfig:
    """Recover the architecture from checkpoint tensor shapes (adaptive-filter models only)."""
    try:
        fh, c1 = state["features.conv0.w"].shape[:2]
        f = state["features.conv2.w"].shape[0]
        kh, nf = state["kernels.conv0.w"].shape[:2]
        fuh, fin = state["fusion.conv0.w"].shape[:2]
    except KeyError as exc:
        raise ArchitectureMismatch(f"cannot infer architecture: missing {exc}; provide the .json sidecar") from None
    c = c1 - 1
    n = nf // f
    s = fin // (n * (f + c))
    if s not in (1, 3) or n * f != nf:
        raise ArchitectureMismatch("checkpoint shapes do not describe a known architecture")
    return ArchConfig(channels=c, burst_size=n, feature_channels=f, feature_hidden=fh,
                      kernel_hidden=kh, fusion_hidden=fuh, prefilter=s == 3)

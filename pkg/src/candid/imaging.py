"""Image I/O, resampling and the PSNR metric.

Images are float32 numpy arrays laid out ``(C, H, W)`` with ``C`` in {1, 3} and
values in [0, 1]. Bursts stack frames on a leading axis: ``(N, C, H, W)``.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"image must be (C,H,W) with C in (1,3), got shape {img.shape}")
    if img.shape[1] < 1 or img.shape[2] < 1:
        raise ValueError("image must have positive height and width")
    if not np.isfinite(img).all():
        raise ValueError("image contains non-finite values")
    return img


def from_uint8(arr: np.ndarray) -> np.ndarray:
    """``(H,W)`` or ``(H,W,C)`` bytes to a planar float image."""
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return np.ascontiguousarray(arr.transpose(2, 0, 1)).astype(np.float32) / np.float32(255.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Round-half-up quantization to ``(H,W,C)`` bytes."""
    img = check_image(img)
    q = np.floor(np.clip(img.astype(np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return q.transpose(1, 2, 0)


# ---------------------------------------------------------------------------
# file formats


def _read_netpbm(raw: bytes, path) -> np.ndarray:
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise OSError(f"{path}: unsupported netpbm variant {magic!r}")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise OSError(f"{path}: malformed netpbm header")
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace byte before the raster
    width, height, maxval = fields
    if maxval != 255:
        raise OSError(f"{path}: only 8-bit netpbm (maxval 255) is supported, got maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    body = raw[pos:pos + need]
    if len(body) != need:
        raise OSError(f"{path}: truncated raster ({len(body)} of {need} bytes)")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, channels)


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit PNG, PGM (P5) or PPM (P6) as a float image in [0, 1]."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] in (b"P5", b"P6"):
        return from_uint8(_read_netpbm(raw, path))
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                im = im.convert("RGB")
            elif mode == "LA":
                im = im.convert("L")
            elif mode == "RGBA":
                im = im.convert("RGB")
            elif mode not in ("L", "RGB"):
                raise OSError(f"{path}: unsupported pixel format {mode!r}; only 8-bit gray or RGB")
            arr = np.asarray(im)
    except PILImage.UnidentifiedImageError as exc:
        raise OSError(f"{path}: unrecognised image file") from exc
    except (SyntaxError, ValueError) as exc:
        raise OSError(f"{path}: {exc}") from exc
    return from_uint8(arr)


def encode_image(img: np.ndarray, fmt: str) -> bytes:
    data = to_uint8(img)
    h, w, c = data.shape
    if fmt in ("ppm", "pgm", "pnm"):
        magic = b"P6" if c == 3 else b"P5"
        return magic + f"\n{w} {h}\n255\n".encode() + data.tobytes()
    if fmt == "png":
        import io

        buf = io.BytesIO()
        PILImage.fromarray(data[:, :, 0] if c == 1 else data, "L" if c == 1 else "RGB").save(buf, "PNG")
        return buf.getvalue()
    raise ValueError(f"unsupported image format {fmt!r}")


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    from .checkpoint import atomic_write

    path = Path(path)
    fmt = path.suffix.lower().lstrip(".") or "png"
    atomic_write(path, encode_image(img, fmt))


# ---------------------------------------------------------------------------
# metrics and color


def psnr(pred: np.ndarray, ref: np.ndarray) -> float:
    """Peak 1.0 PSNR in dB over all pixels and channels, capped at 99 dB."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"psnr shape mismatch: {pred.shape} vs {ref.shape}")
    mse = float(np.mean((pred - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Rec.601 luma; gray images pass through unchanged."""
    img = check_image(img)
    if img.shape[0] == 1:
        return img
    r, g, b = img.astype(np.float32)
    if np.array_equal(r, g) and np.array_equal(g, b):
        return r[None].copy()
    return (LUMA[0] * r + LUMA[1] * g + LUMA[2] * b)[None].astype(np.float32)


def luminance(frames: np.ndarray) -> np.ndarray:
    """``(..., C, H, W)`` to ``(..., H, W)`` luma without validation."""
    if frames.shape[-3] == 1:
        return frames[..., 0, :, :]
    return np.tensordot(LUMA, frames, axes=([0], [-3])).astype(frames.dtype)


def crop(img: np.ndarray, top: int, left: int, height: int, width: int) -> np.ndarray:
    img = check_image(img)
    _, h, w = img.shape
    if top < 0 or left < 0 or top + height > h or left + width > w:
        raise ValueError(f"crop ({top},{left},{height},{width}) outside {h}x{w} image")
    return img[:, top:top + height, left:left + width].copy()


# ---------------------------------------------------------------------------
# resampling


def bilinear_taps(x: np.ndarray, y: np.ndarray, h: int, w: int):
    """Corner indices and weights for clamp-to-edge bilinear sampling at (x, y)."""
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return (y0, x0, y0, x1, y1, x0, y1, x1), ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)


def sample_bilinear(data: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample ``(..., H, W)`` data at coordinates ``x, y`` of shape ``(..., Ho, Wo)``.

    Coordinates broadcast against the leading axes of ``data``. Out-of-range
    reads clamp to the nearest edge pixel.
    """
    h, w = data.shape[-2:]
    ho, wo = x.shape[-2:]
    idx, wts = bilinear_taps(x, y, h, w)
    lead = np.broadcast_shapes(data.shape[:-2], x.shape[:-2])
    flat = np.broadcast_to(data, lead + (h, w)).reshape(-1, h * w)
    out = np.zeros((flat.shape[0], ho * wo), dtype=np.float64)
    for k in range(4):
        yy, xx = idx[2 * k], idx[2 * k + 1]
        lin = np.broadcast_to(yy * w + xx, lead + (ho, wo)).reshape(-1, ho * wo)
        wk = np.broadcast_to(wts[k], lead + (ho, wo)).reshape(-1, ho * wo)
        out += wk * np.take_along_axis(flat, lin, axis=1)
    return out.reshape(lead + (ho, wo)).astype(data.dtype)


def shift_image(img: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Translate image content by (dx, dy) pixels: ``out(x, y) = img(x - dx, y - dy)``."""
    img = check_image(img)
    _, h, w = img.shape
    limit = min(h, w) / 2
    if abs(dx) >= limit or abs(dy) >= limit:
        raise ValueError(f"shift ({dx}, {dy}) too large for {h}x{w} image (limit {limit})")
    if dx == 0 and dy == 0:
        return img.copy()
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return sample_bilinear(img, xs - dx, ys - dy)

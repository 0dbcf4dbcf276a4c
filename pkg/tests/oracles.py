"""Slow, obviously-correct reference implementations used by the tests."""

from __future__ import annotations

import math

import numpy as np


def conv2d_loops(x, w, b=None, padding="same"):
    """Direct nested-loop cross-correlation of [B,Cin,H,W] with [Cout,Cin,k,k], float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    bsz, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    p = k // 2 if padding == "same" else 0
    ho, wo = h + 2 * p - k + 1, wd + 2 * p - k + 1
    out = np.zeros((bsz, cout, ho, wo))
    for n in range(bsz):
        for o in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(cin):
                        for i in range(k):
                            for j in range(k):
                                yy, xj = y + i - p, xx + j - p
                                if 0 <= yy < h and 0 <= xj < wd:
                                    acc += x[n, c, yy, xj] * w[o, c, i, j]
                    out[n, o, y, xx] = acc
    return out


def apply_kernels_loops(images, kernels):
    """Per-pixel k x k weighted sum with clamp-to-edge reads. images [N,C,H,W], kernels [N,H,W,k,k]."""
    images = np.asarray(images, dtype=np.float64)
    n, c, h, w = images.shape
    k = kernels.shape[-1]
    r = k // 2
    out = np.zeros_like(images)
    for f in range(n):
        for y in range(h):
            for x in range(w):
                for i in range(k):
                    for j in range(k):
                        yy = min(max(y + i - r, 0), h - 1)
                        xx = min(max(x + j - r, 0), w - 1)
                        out[f, :, y, x] += kernels[f, y, x, i, j] * images[f, :, yy, xx]
    return out


def bilinear_clamped(img, x, y):
    """Sample a 2-D array at one (x, y) position with clamp-to-edge reads."""
    h, w = img.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    return ((1 - fx) * (1 - fy) * img[y0, x0] + fx * (1 - fy) * img[y0, x1]
            + (1 - fx) * fy * img[y1, x0] + fx * fy * img[y1, x1])


def warp_loops(data, flow):
    """Backward warp [C,H,W] by [H,W,2]: out(x, y) = data(x + dx, y + dy)."""
    data = np.asarray(data, dtype=np.float64)
    c, h, w = data.shape
    out = np.zeros_like(data)
    for y in range(h):
        for x in range(w):
            dx, dy = flow[y, x]
            for ch in range(c):
                out[ch, y, x] = bilinear_clamped(data[ch], x + float(dx), y + float(dy))
    return out


def adam_scalar(theta, grads, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """Textbook ADAM on one scalar; returns the parameter after each step."""
    m = v = 0.0
    trace = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
        trace.append(theta)
    return trace


def bilateral_loops(img, range_sigma, spatial_sigma=1.5, window=5):
    """Bilateral filter on [C,H,W] with clamp-to-edge reads and channel-summed range distance."""
    img = np.asarray(img, dtype=np.float64)
    c, h, w = img.shape
    r = window // 2
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            num = np.zeros(c)
            den = 0.0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy = min(max(y + dy, 0), h - 1)
                    xx = min(max(x + dx, 0), w - 1)
                    d2 = float(((img[:, yy, xx] - img[:, y, x]) ** 2).sum())
                    wt = math.exp(-(dx * dx + dy * dy) / (2 * spatial_sigma ** 2) - d2 / (2 * range_sigma ** 2))
                    num += wt * img[:, yy, xx]
                    den += wt
            out[:, y, x] = num / den
    return out


def numeric_grad(f, x, h=1e-4):
    """Central finite differences of scalar ``f`` with respect to every entry of ``x`` (in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def integer_shift_xcorr(ref, sec, max_shift):
    """Best integer (dx, dy) with sec(x, y) ~ ref(x - dx, y - dy), by exhaustive interior correlation."""
    h, w = ref.shape
    m = max_shift
    best, arg = -np.inf, (0, 0)
    a = ref[m:h - m, m:w - m]
    a = a - a.mean()
    for dy in range(-m, m + 1):
        for dx in range(-m, m + 1):
            b = sec[m + dy:h - m + dy, m + dx:w - m + dx]
            b = b - b.mean()
            score = float((a * b).sum() / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))
            if score > best:
                best, arg = score, (dx, dy)
    return arg


def cosine_texture(seed, size, dx=0.0, dy=0.0, n=24, fmin=0.04, fmax=0.2):
    """Band-limited sum of random plane waves, evaluated at (x - dx, y - dy) and mapped into [0.1, 0.9].

    Evaluating the closed form at shifted coordinates gives an exact sub-pixel
    translation with no resampling error.
    """
    rng = np.random.default_rng(seed)
    f = rng.uniform(fmin, fmax, n)
    th = rng.uniform(0, np.pi, n)
    ph = rng.uniform(0, 2 * np.pi, n)

    def render(ox, oy):
        ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
        xs, ys = xs - ox, ys - oy
        out = np.zeros((size, size))
        for fi, ti, pi in zip(f, th, ph):
            out += np.cos(2 * np.pi * fi * (np.cos(ti) * xs + np.sin(ti) * ys) + pi)
        return out

    base = render(0.0, 0.0)
    lo, hi = base.min(), base.max()
    out = 0.1 + 0.8 * (render(dx, dy) - lo) / (hi - lo)
    return np.clip(out, 0, 1).astype(np.float32)[None]

"""Synthetic moving-scene clips.

A scene is a band-limited texture (sum of Gaussian-filtered noise octaves)
with one to three soft-edged rectangles or ellipses painted into it.  Each
frame bilinearly resamples the previous one through the one-step motion, so
the scene moves as one rigid layer: for a translation ``v`` (pixels per
frame, (dx, dy)) ``frame[t+1](p) == frame[t](p - v)`` exactly, wherever the
sample stays inside the rendered canvas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _sampling

N_FRAMES = 5


@dataclass
class Clip:
    frames: np.ndarray  # (5, H, W) float in [0, 1]
    motion: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.frames.ndim != 3 or self.frames.shape[0] != N_FRAMES:
            raise ValueError(f"a clip holds exactly {N_FRAMES} frames of identical size, got {self.frames.shape}")


def _smooth_noise(rng, h, w, sigma):
    noise = rng.standard_normal((h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    gain = np.exp(-2 * (math.pi * sigma) ** 2 * (fy**2 + fx**2))
    out = np.fft.irfft2(np.fft.rfft2(noise) * gain, s=(h, w))
    return out / (out.std() + 1e-12)


def render_scene(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """A (h, w) canvas with values in [0, 1]."""
    tex = sum(a * _smooth_noise(rng, h, w, s) for a, s in ((1.0, 8.0), (0.5, 4.0), (0.25, 2.0)))
    lo, hi = tex.min(), tex.max()
    canvas = 0.2 + 0.6 * (tex - lo) / (hi - lo + 1e-12)
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
        ry, rx = rng.uniform(0.05, 0.2) * h, rng.uniform(0.05, 0.2) * w
        if rng.random() < 0.5:
            # signed distance outside an axis-aligned box (negative inside)
            dist = np.maximum(np.abs(gy - cy) - ry, np.abs(gx - cx) - rx)
        else:
            r = np.sqrt(((gy - cy) / ry) ** 2 + ((gx - cx) / rx) ** 2)
            dist = (r - 1.0) * min(ry, rx)
        alpha = 1.0 / (1.0 + np.exp(np.clip(dist / 0.75, -50, 50)))
        shade = rng.uniform(0.05, 0.95) + 0.05 * _smooth_noise(rng, h, w, 3.0)
        canvas = canvas * (1 - alpha) + np.clip(shade, 0, 1) * alpha
    return canvas


def sample_bilinear(canvas: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Canvas values at fractional positions (clamped at the border)."""
    h, w = canvas.shape
    src = np.ascontiguousarray(canvas, dtype=np.float64)[None, :, :, None]
    y = np.ascontiguousarray(ys, dtype=np.float64).reshape(1, -1, 1)
    x = np.ascontiguousarray(xs, dtype=np.float64).reshape(1, -1, 1)
    out = np.empty((1, y.shape[1], 1))
    _sampling.sample_forward(src, y, x, np.ones_like(y), 1, out, 1.0, float(h - 1), float(w - 1))
    return out.reshape(ys.shape)


def synth_clip(
    rng: np.random.Generator,
    size: tuple = (96, 96),
    velocity: tuple | None = None,
    max_speed: float = 3.0,
    motion: str = "translate",
    integer: bool = False,
) -> Clip:
    """Render a 5-frame clip.

    ``velocity`` is (dx, dy) pixels per frame; when omitted it is drawn
    uniformly from the disc of radius ``max_speed`` (rounded to integers
    if ``integer``).  ``motion="affine"`` adds a small per-frame rotation
    and zoom about the frame center on top of the translation.
    """
    if motion not in ("translate", "affine"):
        raise ValueError(f"motion must be 'translate' or 'affine', got {motion!r}")
    h, w = size
    if velocity is None:
        while True:
            r = max_speed * math.sqrt(rng.random())
            a = rng.uniform(0, 2 * math.pi)
            v = np.array([r * math.cos(a), r * math.sin(a)])
            if integer:
                v = np.round(v)
            if np.hypot(*v) <= max_speed + 1e-12:
                break
    else:
        v = np.asarray(velocity, dtype=np.float64)
    if np.hypot(*v) > 8.0:
        raise ValueError(f"speed {np.hypot(*v):.3f} exceeds 8 px/frame")
    angle, zoom = 0.0, 1.0
    if motion == "affine":
        angle = rng.uniform(-0.02, 0.02)
        zoom = rng.uniform(0.98, 1.02)
    reach = math.ceil(4 * np.hypot(*v) + 0.12 * max(h, w) * (motion == "affine")) + 4
    ch, cw = h + 2 * reach, w + 2 * reach
    canvas = render_scene(rng, ch, cw)
    # Each frame resamples the previous one on the full canvas, so frame t+1
    # is exactly frame t warped by the one-step motion away from the canvas edge.
    gy, gx = np.mgrid[0:ch, 0:cw].astype(np.float64)
    cy, cx = (ch - 1) / 2, (cw - 1) / 2
    c, sn = math.cos(-angle), math.sin(-angle)
    dy, dx = gy - cy, gx - cx
    qy = (c * dy + sn * dx) / zoom + cy - v[1]
    qx = (-sn * dy + c * dx) / zoom + cx - v[0]
    frames = np.empty((N_FRAMES, h, w))
    for t in range(N_FRAMES):
        if t:
            canvas = sample_bilinear(canvas, qy, qx)
        frames[t] = canvas[reach : reach + h, reach : reach + w]
    desc = {"motion": motion, "dx": float(v[0]), "dy": float(v[1])}
    if motion == "affine":
        desc.update(angle=angle, zoom=zoom)
    return Clip(np.clip(frames, 0.0, 1.0), desc)


def synth_set(seed: int, count: int, **kw) -> list[Clip]:
    """``count`` clips, clip ``i`` drawn from ``default_rng([seed, i])``."""
    return [synth_clip(np.random.default_rng([seed, i]), **kw) for i in range(count)]


def random_crop_batch(clips: list[Clip], crop: tuple, rng: np.random.Generator, dtype=np.float32):
    """(B, 4, ch, cw) inputs and (B, 1, ch, cw) targets, one crop offset per clip."""
    ch, cw = crop
    inputs = np.empty((len(clips), 4, ch, cw), dtype=dtype)
    targets = np.empty((len(clips), 1, ch, cw), dtype=dtype)
    for b, clip in enumerate(clips):
        _, h, w = clip.frames.shape
        if h < ch or w < cw:
            raise ValueError(f"clip {h}x{w} is smaller than crop {ch}x{cw}")
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        window = clip.frames[:, y0 : y0 + ch, x0 : x0 + cw]
        inputs[b] = window[:4]
        targets[b, 0] = window[4]
    return inputs, targets

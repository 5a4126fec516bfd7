"""Image-quality metrics, error maps and image file I/O."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ShapeMismatch
from .losses import C1, C2, gaussian_window

PSNR_CAP = 100.0


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatch(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y) -> float:
    """Peak signal-to-noise ratio for images in ``[0, 1]``; capped at 100 dB."""
    x, y = _pair(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * np.log10(mse))


def _valid_filter(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Gaussian-weighted window sums over fully interior windows only."""
    k = len(w)
    out = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ w
    out = np.lib.stride_tricks.sliding_window_view(out, k, axis=1) @ w
    return out


def ssim(x, y) -> float:
    """Structural similarity averaged over valid 11x11 windows and channels.

    Images smaller than the window fall back to a single window covering the
    whole image.
    """
    x, y = _pair(x, y)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    H, W = x.shape[:2]
    size = min(11, H, W)
    w = gaussian_window(size, 1.5)
    f = lambda a: _valid_filter(a, w)
    mx, my = f(x), f(y)
    sxx = f(x * x) - mx * mx
    syy = f(y * y) - my * my
    sxy = f(x * y) - mx * my
    s = ((2 * mx * my + C1) * (2 * sxy + C2)) / ((mx * mx + my * my + C1) * (sxx + syy + C2))
    return float(s.mean())


# fixed blue -> yellow -> red ramp used for every error map
_RAMP = np.array([[0.0, 0.0, 0.5], [0.0, 0.4, 1.0], [0.2, 0.9, 0.6], [1.0, 0.9, 0.0], [1.0, 0.3, 0.0],
                  [0.6, 0.0, 0.0]])


def error_map(x, y, vmax: float = 0.25) -> np.ndarray:
    """Per-pixel mean absolute error, colour-coded on a fixed scale ``[0, vmax]``."""
    x, y = _pair(x, y)
    err = np.abs(x - y)
    if err.ndim == 3:
        err = err.mean(axis=-1)
    u = np.clip(err / vmax, 0.0, 1.0) * (len(_RAMP) - 1)
    lo = np.floor(u).astype(int).clip(0, len(_RAMP) - 2)
    frac = (u - lo)[..., None]
    return _RAMP[lo] * (1.0 - frac) + _RAMP[lo + 1] * frac


def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(img, path) -> None:
    """Write a float ``[0, 1]`` RGB image as 8-bit PNG (or PPM by extension)."""
    Image.fromarray(to_uint8(img)).save(Path(path))


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0

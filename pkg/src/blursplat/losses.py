"""Photometric training loss: weighted L1 plus structural dissimilarity.

The training SSIM filters with an 11x11 Gaussian (sigma 1.5) under zero
padding so that every pixel, border included, receives a gradient.  The
evaluation SSIM in :mod:`blursplat.metrics` uses valid windows only.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ShapeMismatch

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2
DEFAULT_LAMBDA = 0.2


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    w = np.exp(-(x**2) / (2.0 * sigma**2))
    return w / w.sum()


_WINDOW = gaussian_window()


def _filter(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian blur of an ``(H, W, C)`` array, zero outside the image.

    The window is symmetric, so this operator is its own adjoint.
    """
    out = correlate1d(img, _WINDOW, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _WINDOW, axis=1, mode="constant", cval=0.0)


def _check(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatch(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x, y = _check(x, y)
    return _ssim_terms(x, y)[0]


def _ssim_terms(x, y):
    mx, my = _filter(x), _filter(y)
    exx, eyy, exy = _filter(x * x), _filter(y * y), _filter(x * y)
    sxx = exx - mx * mx
    syy = eyy - my * my
    sxy = exy - mx * my
    a1 = 2.0 * mx * my + C1
    a2 = 2.0 * sxy + C2
    b1 = mx * mx + my * my + C1
    b2 = sxx + syy + C2
    s = (a1 * a2) / (b1 * b2)
    return s, mx, my, a1, a2, b1, b2


def ssim_loss(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean zero-padded SSIM of ``x`` against ``y`` and its gradient w.r.t. ``x``."""
    x, y = _check(x, y)
    s, mx, my, a1, a2, b1, b2 = _ssim_terms(x, y)
    g = 1.0 / s.size
    # partials of s with respect to the filtered moments of x
    d_mx = g * (2.0 * my * a2 / (b1 * b2) - 2.0 * my * a1 / (b1 * b2)
                - 2.0 * mx * s / b1 + 2.0 * mx * s / b2)
    d_exx = g * (-s / b2)
    d_exy = g * (2.0 * a1 / (b1 * b2))
    grad = _filter(d_mx) + 2.0 * x * _filter(d_exx) + y * _filter(d_exy)
    return float(s.mean()), grad


def l1_loss(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    x, y = _check(x, y)
    d = x - y
    return float(np.abs(d).mean()), np.sign(d) / d.size


def photometric_loss(x: np.ndarray, y: np.ndarray, lam: float = DEFAULT_LAMBDA) -> tuple[float, np.ndarray]:
    """``(1 - lam) L1 + lam (1 - SSIM) / 2`` and its gradient w.r.t. ``x``."""
    l1, g1 = l1_loss(x, y)
    s, gs = ssim_loss(x, y)
    loss = (1.0 - lam) * l1 + lam * (1.0 - s) / 2.0
    return loss, (1.0 - lam) * g1 - 0.5 * lam * gs

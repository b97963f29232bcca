"""Restoration quality metrics: PSNR and Gaussian-window SSIM."""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError
from .tensor import ConvSpec, conv2d_forward, require_same_shape

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE); returns math.inf when the images are equal."""
    require_same_shape(a, b, "psnr")
    d = a.astype(np.float64) - b.astype(np.float64)
    mse = float(np.mean(d * d))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Channels are treated independently and averaged.  Images smaller than
    the window are rejected.
    """
    require_same_shape(a, b, "ssim")
    n, c, h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(
            f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    weight = np.broadcast_to(win, (c, 1, SSIM_WINDOW, SSIM_WINDOW)).copy()
    spec = ConvSpec(c, c, SSIM_WINDOW, stride=1, padding=0, groups=c)

    def filt(x):
        return conv2d_forward(x, weight, None, spec)

    mu_a = filt(a)
    mu_b = filt(b)
    mu_a2, mu_b2, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = filt(a * a) - mu_a2
    var_b = filt(b * b) - mu_b2
    cov = filt(a * b) - mu_ab
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    ssim_map = ((2 * mu_ab + c1) * (2 * cov + c2)) / (
        (mu_a2 + mu_b2 + c1) * (var_a + var_b + c2)
    )
    return float(np.mean(ssim_map))

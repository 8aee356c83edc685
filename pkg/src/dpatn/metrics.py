"""PSNR and SSIM for images with unit peak value."""

from __future__ import annotations

import numpy as np
from scipy.signal import fftconvolve

PSNR_CAP = 99.0
_LUMA = np.array([0.299, 0.587, 0.114])


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def luminance(img):
    img = np.asarray(img, dtype=np.float64)
    return img @ _LUMA if img.ndim == 3 else img


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Mean SSIM over all fully-contained windows of the luminance channel."""
    a, b = _same_shape(a, b)
    x, y = luminance(a), luminance(b)
    if x.shape[0] < size or x.shape[1] < size:
        raise ValueError(f"images smaller than the {size}x{size} SSIM window")
    w = gaussian_window(size, sigma)

    def filt(f):
        return fftconvolve(f, w, mode="valid")

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))

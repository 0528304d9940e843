"""PSNR and SSIM for images in [0, 1], optionally restricted to a mask."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _check_mask(mask, shape) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {shape[:2]}")
    if not mask.any():
        raise ValueError("mask selects no pixels")
    return mask


def mse(a, b, mask=None) -> float:
    a, b = _pair(a, b)
    err = (a - b) ** 2
    if mask is not None:
        err = err[_check_mask(mask, a.shape)]
    return float(err.mean())


def psnr(a, b, mask=None) -> float:
    """10 log10(1 / MSE), capped at 99 dB when the MSE is below 1e-10."""
    m = mse(a, b, mask)
    if m < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / m))


def ssim_map(a, b) -> np.ndarray:
    """Per-pixel SSIM (H, W) with an 11x11 Gaussian window (sigma 1.5), averaged over channels."""
    a, b = _pair(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    radius = SSIM_WINDOW // 2

    def blur(x):
        return ndimage.gaussian_filter(x, SSIM_SIGMA, mode="reflect", truncate=radius / SSIM_SIGMA)

    maps = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = blur(x), blur(y)
        sxx = blur(x * x) - mx * mx
        syy = blur(y * y) - my * my
        sxy = blur(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        maps.append(num / den)
    return np.mean(maps, axis=0)


def ssim(a, b, mask=None) -> float:
    m = ssim_map(a, b)
    if mask is not None:
        m = m[_check_mask(mask, m.shape)]
    return float(m.mean())

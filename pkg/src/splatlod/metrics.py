"""Image metrics: PSNR and SSIM (11-tap Gaussian window, sigma 1.5), with the
SSIM gradient needed by the photometric loss."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DimensionMismatch

PSNR_CAP = 99.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5


def _check(img, ref):
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise DimensionMismatch(f"image shapes differ: {img.shape} vs {ref.shape}")
    return img, ref


def psnr(img, ref) -> float:
    """PSNR in dB for images in [0, 1]; identical images report PSNR_CAP."""
    img, ref = _check(img, ref)
    mse = float(np.mean((img - ref) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(-10.0 * np.log10(mse))


def _blur(x):
    # zero padding keeps the operator symmetric, so it is its own adjoint
    sig = (SSIM_SIGMA, SSIM_SIGMA) + (0,) * (x.ndim - 2)
    return gaussian_filter(x, sig, mode="constant", cval=0.0, truncate=SSIM_RADIUS / SSIM_SIGMA)


def _ssim_terms(x, y):
    mx, my = _blur(x), _blur(y)
    vx = _blur(x * x) - mx * mx
    vy = _blur(y * y) - my * my
    cxy = _blur(x * y) - mx * my
    num1 = 2 * mx * my + SSIM_C1
    num2 = 2 * cxy + SSIM_C2
    den1 = mx * mx + my * my + SSIM_C1
    den2 = vx + vy + SSIM_C2
    return mx, my, num1, num2, den1, den2


def ssim_map(img, ref) -> np.ndarray:
    img, ref = _check(img, ref)
    _, _, n1, n2, d1, d2 = _ssim_terms(img, ref)
    return (n1 * n2) / (d1 * d2)


def ssim(img, ref) -> float:
    """Mean SSIM over all pixels and channels of (H, W[, C]) images."""
    return float(np.mean(ssim_map(img, ref)))


def ssim_grad(img, ref):
    """(SSIM, dSSIM/dimg) for the mean SSIM of ``img`` against ``ref``."""
    x, y = _check(img, ref)
    mx, my, n1, n2, d1, d2 = _ssim_terms(x, y)
    s = (n1 * n2) / (d1 * d2)
    inv = 1.0 / x.size
    # partials w.r.t. mu_x, var_x and cov_xy, holding the others fixed
    ds_dmx = (2 * my * n2) / (d1 * d2) - s * 2 * mx / d1
    ds_dvx = -s / d2
    ds_dcxy = 2 * n1 / (d1 * d2)
    # var_x = B(x^2) - mu_x^2 and cov = B(xy) - mu_x mu_y
    g_mx = ds_dmx - 2 * mx * ds_dvx - my * ds_dcxy
    grad = _blur(g_mx) + 2 * x * _blur(ds_dvx) + y * _blur(ds_dcxy)
    return float(np.mean(s)), grad * inv


def metrics(img, ref):
    """(PSNR dB, SSIM)."""
    return psnr(img, ref), ssim(img, ref)

"""PSNR and SSIM on magnitude images (evaluation against ground truth only)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import correlate2d

from .errors import DimensionError, InvalidInputError
from .fourier import as_image

__all__ = ["MetricReport", "PSNR_CAP", "psnr", "ssim", "gaussian_window", "evaluate"]

PSNR_CAP = 200.0
WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    ssim: float


def _magnitudes(ref, test):
    r = np.abs(as_image(ref, "reference"))
    t = np.abs(as_image(test, "test"))
    if r.shape != t.shape:
        raise DimensionError(f"shape mismatch: {r.shape} vs {t.shape}")
    return r, t


def psnr(ref, test) -> float:
    """10 log10(peak^2 / MSE) with peak = max |ref|; capped at 200 dB."""
    r, t = _magnitudes(ref, test)
    peak = r.max()
    if peak == 0:
        raise InvalidInputError("reference image is identically zero")
    mse = float(np.mean((r - t) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(float(10 * np.log10(peak**2 / mse)), PSNR_CAP)


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(ref, test) -> float:
    """Mean SSIM over all fully contained 11x11 Gaussian windows (sigma 1.5)."""
    r, t = _magnitudes(ref, test)
    if min(r.shape) < WINDOW:
        raise DimensionError(f"images must be at least {WINDOW}x{WINDOW}, got {r.shape}")
    peak = r.max()
    drange = peak if peak > 0 else 1.0
    c1 = (K1 * drange) ** 2
    c2 = (K2 * drange) ** 2
    w = gaussian_window()

    def filt(a):
        return correlate2d(a, w, mode="valid")

    mu_r, mu_t = filt(r), filt(t)
    var_r = filt(r * r) - mu_r * mu_r
    var_t = filt(t * t) - mu_t * mu_t
    cov = filt(r * t) - mu_r * mu_t
    num = (2 * mu_r * mu_t + c1) * (2 * cov + c2)
    den = (mu_r * mu_r + mu_t * mu_t + c1) * (var_r + var_t + c2)
    return float(np.mean(num / den))


def evaluate(ref, test) -> MetricReport:
    return MetricReport(psnr(ref, test), ssim(ref, test))

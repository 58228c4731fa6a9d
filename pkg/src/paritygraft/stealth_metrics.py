"""PSNR and SSIM between 8-bit images, for certifying trigger invisibility."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .pixelmath import PixelImage

# standard SSIM constants for 8-bit dynamic range
_C1 = (0.01 * 255.0) ** 2
_C2 = (0.03 * 255.0) ** 2
_WIN = 11
_SIGMA = 1.5


@dataclass(frozen=True)
class QualityScore:
    psnr_db: float  # math.inf for identical images
    ssim: float


def _check_pair(a: PixelImage, b: PixelImage) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(a: PixelImage, b: PixelImage) -> float:
    """10*log10(255^2 / MSE) over all C*H*W values; +inf if identical."""
    _check_pair(a, b)
    if a.data == b.data:
        return math.inf
    x = a.to_array().astype(np.float64)
    y = b.to_array().astype(np.float64)
    mse = float(np.mean((x - y) ** 2))
    return 10.0 * math.log10(255.0 ** 2 / mse)


def _gaussian_window() -> np.ndarray:
    off = np.arange(_WIN, dtype=np.float64) - (_WIN - 1) / 2.0
    g = np.exp(-(off ** 2) / (2.0 * _SIGMA ** 2))
    w = np.outer(g, g)
    return w / w.sum()


_W2D = _gaussian_window()


def _filtered(x: np.ndarray) -> np.ndarray:
    # valid-mode Gaussian-weighted local mean
    win = sliding_window_view(x, (_WIN, _WIN))
    return np.tensordot(win, _W2D, axes=([2, 3], [0, 1]))


def ssim(a: PixelImage, b: PixelImage) -> float:
    """Mean local SSIM, 11x11 Gaussian window sigma 1.5, per channel, averaged."""
    _check_pair(a, b)
    if a.height < _WIN or a.width < _WIN:
        raise ValueError(f"image must be at least {_WIN}x{_WIN} for SSIM")
    xs = a.to_array().astype(np.float64)
    ys = b.to_array().astype(np.float64)
    vals = []
    for c in range(a.channels):
        x, y = xs[c], ys[c]
        ux = _filtered(x)
        uy = _filtered(y)
        uxx = _filtered(x * x)
        uyy = _filtered(y * y)
        uxy = _filtered(x * y)
        vx = uxx - ux * ux
        vy = uyy - uy * uy
        cov = uxy - ux * uy
        num = (2.0 * ux * uy + _C1) * (2.0 * cov + _C2)
        den = (ux * ux + uy * uy + _C1) * (vx + vy + _C2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


def quality(a: PixelImage, b: PixelImage) -> QualityScore:
    return QualityScore(psnr(a, b), ssim(a, b))


def psnr_json_value(p: float) -> object:
    """Reports carry +inf PSNR as the string sentinel, never a float overflow."""
    if math.isinf(p):
        return "+inf" if p > 0 else "-inf"
    return p

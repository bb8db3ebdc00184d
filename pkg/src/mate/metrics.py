"""Image quality measures: windowed SSIM, PSNR and mask-weighted variants.

SSIM uses uniform 8x8 windows at stride 1 on the grayscale image, with
K1 = 0.01, K2 = 0.03 and L = 255.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.signal import convolve2d

from .imaging import ImagePlane, Mask, to_grayscale

WINDOW = 8
K1, K2, L = 0.01, 0.03, 255.0
C1 = (K1 * L) ** 2
C2 = (K2 * L) ** 2


class MetricsError(Exception):
    pass


def _same_size(op: str, a, b) -> None:
    if a.size != b.size:
        raise MetricsError(f"{op}: dimension mismatch {a.size} vs {b.size}")


def _gray(img: ImagePlane) -> np.ndarray:
    plane = to_grayscale(img) if img.channels == 3 else img
    return plane.samples[:, :, 0].astype(np.float64)


def _window_mean(x: np.ndarray) -> np.ndarray:
    return convolve2d(x, np.full((WINDOW, WINDOW), 1.0 / (WINDOW * WINDOW)), mode="valid")


def ssim_map(a: ImagePlane, b: ImagePlane) -> np.ndarray:
    """Local SSIM for every fully contained 8x8 window."""
    _same_size("ssim", a, b)
    if a.width < WINDOW or a.height < WINDOW:
        raise MetricsError(f"ssim: image {a.width}x{a.height} is smaller than the {WINDOW}x{WINDOW} window")
    x, y = _gray(a), _gray(b)
    mu_x, mu_y = _window_mean(x), _window_mean(y)
    var_x = _window_mean(x * x) - mu_x * mu_x
    var_y = _window_mean(y * y) - mu_y * mu_y
    cov = _window_mean(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + C1) * (2.0 * cov + C2)
    den = (mu_x * mu_x + mu_y * mu_y + C1) * (var_x + var_y + C2)
    return num / den


def ssim(a: ImagePlane, b: ImagePlane) -> float:
    return float(ssim_map(a, b).mean())


def masked_ssim(a: ImagePlane, b: ImagePlane, f: Mask) -> float:
    """SSIM averaged over windows, each weighted by the mask mass it covers."""
    _same_size("masked_ssim", a, f)
    local = ssim_map(a, b)
    coverage = _window_mean(f.values)
    total = coverage.sum()
    if total <= 0:
        raise MetricsError("masked_ssim: mask is empty")
    return float((local * coverage).sum() / total)


def mse(a: ImagePlane, b: ImagePlane) -> float:
    _same_size("mse", a, b)
    if a.channels != b.channels:
        raise MetricsError("mse: channel count mismatch")
    diff = a.to_float() - b.to_float()
    return float((diff * diff).mean())


def psnr(a: ImagePlane, b: ImagePlane) -> float:
    """Peak signal-to-noise ratio in dB; identical images give math.inf."""
    err = mse(a, b)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(L * L / err)


def masked_mse(a: ImagePlane, b: ImagePlane, f: Mask) -> float:
    """sum(f * (a - b)^2) / (sum(f) * channels)."""
    _same_size("masked_mse", a, b)
    _same_size("masked_mse", a, f)
    if a.channels != b.channels:
        raise MetricsError("masked_mse: channel count mismatch")
    weight = f.values[:, :, None]
    mass = float(f.values.sum()) * a.channels
    if mass <= 0:
        raise MetricsError("masked_mse: mask is empty")
    diff = a.to_float() - b.to_float()
    return float((weight * diff * diff).sum() / mass)


def material_similarity(output: ImagePlane, material: ImagePlane, f: Mask) -> float:
    """1 - mean channel distance between the output foreground colour and the swatch colour, over 255."""
    _same_size("material_similarity", output, f)
    fg = f.foreground()
    if not fg.any():
        raise MetricsError("material_similarity: mask has no foreground")
    if output.channels != material.channels:
        raise MetricsError("material_similarity: channel count mismatch")
    out_mean = output.to_float()[fg].mean(axis=0)
    mat_mean = material.to_float().reshape(-1, material.channels).mean(axis=0)
    return float(1.0 - np.abs(out_mean - mat_mean).mean() / L)


__all__ = [
    "C1",
    "C2",
    "MetricsError",
    "WINDOW",
    "masked_mse",
    "masked_ssim",
    "material_similarity",
    "mse",
    "psnr",
    "ssim",
    "ssim_map",
]

"""PSNR and SSIM for images in ``[0, 1]``."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 99.0
SSIM_WINDOW = 7


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 dB for identical images."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(max_val ** 2 / mse))


def ssim(a, b, data_range: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all valid ``window x window`` uniform windows and channels.

    Accepts ``[H, W]`` or ``[C, H, W]``. Window statistics use population
    (1/N) moments; ``C1 = (0.01 L)^2``, ``C2 = (0.03 L)^2``.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValueError(f"expected [H,W] or [C,H,W], got shape {a.shape}")
    return float(_ssim_map(a[None], b[None], data_range, window).mean())


def _ssim_map(a: np.ndarray, b: np.ndarray, data_range: float, window: int) -> np.ndarray:
    # [N,C,H,W] -> [N, C*(H-w+1)*(W-w+1)] local SSIM values
    if min(a.shape[2:]) < window:
        raise ValueError(f"image {a.shape[2]}x{a.shape[3]} smaller than {window}x{window} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    wa = sliding_window_view(a, (window, window), axis=(2, 3))
    wb = sliding_window_view(b, (window, window), axis=(2, 3))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a ** 2
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return (num / den).reshape(a.shape[0], -1)


def batch_metric(name: str, preds: np.ndarray, targets: np.ndarray) -> float:
    """Mean per-image metric over a batch ``[N, C, H, W]``."""
    if name == "ssim":
        a, b = _pair(preds, targets)
        return float(np.mean(_ssim_map(a, b, 1.0, SSIM_WINDOW).mean(axis=1)))
    fn = {"psnr": psnr}[name]
    return float(np.mean([fn(p, t) for p, t in zip(preds, targets)]))

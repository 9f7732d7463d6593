"""Image quality metrics on float images in [0, 1].

SSIM is the single-scale form with an 11x11 Gaussian window (sigma 1.5),
``k1 = 0.01``, ``k2 = 0.03``, evaluated at every window position fully inside
the image and averaged over positions and channels.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 100.0
WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03
C1, C2 = K1 ** 2, K2 ** 2


class ImageSizeError(ValueError):
    pass


def _pixels(img) -> np.ndarray:
    return np.asarray(getattr(img, "rgb", img), dtype=np.float64)


def _check_pair(a, b):
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ImageSizeError(f"image sizes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """PSNR in dB for peak value 1, capped at 100 dB."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / err)))


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-x ** 2 / (2 * sigma ** 2))
    return w / w.sum()


def _filter_valid(x, w):
    # separable correlation over the two leading axes, valid positions only
    x = sliding_window_view(x, len(w), axis=0) @ w
    return sliding_window_view(x, len(w), axis=1) @ w


def _filter_adjoint(g, w):
    k = len(w) - 1
    g = np.pad(g, ((k, k), (0, 0), (0, 0)))
    g = sliding_window_view(g, len(w), axis=0) @ w[::-1]
    g = np.pad(g, ((0, 0), (k, k), (0, 0)))
    return sliding_window_view(g, len(w), axis=1) @ w[::-1]


def _as_hwc(img):
    return img[..., None] if img.ndim == 2 else img


def _ssim_terms(a, b):
    w = gaussian_window()
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    e_aa, e_bb, e_ab = _filter_valid(a * a, w), _filter_valid(b * b, w), _filter_valid(a * b, w)
    num1 = 2 * mu_a * mu_b + C1
    num2 = 2 * (e_ab - mu_a * mu_b) + C2
    den1 = mu_a ** 2 + mu_b ** 2 + C1
    den2 = (e_aa - mu_a ** 2) + (e_bb - mu_b ** 2) + C2
    return w, mu_a, mu_b, num1, num2, den1, den2


def ssim(a, b) -> float:
    a, b = _check_pair(a, b)
    a, b = _as_hwc(a), _as_hwc(b)
    if min(a.shape[:2]) < WINDOW:
        raise ImageSizeError(f"SSIM needs both sides >= {WINDOW}, got {a.shape[:2]}")
    _, _, _, num1, num2, den1, den2 = _ssim_terms(a, b)
    return float(np.mean(num1 * num2 / (den1 * den2)))


def ssim_with_grad(a, b) -> tuple[float, np.ndarray]:
    """SSIM and its gradient with respect to the first image."""
    a, b = _check_pair(a, b)
    shape = a.shape
    a, b = _as_hwc(a), _as_hwc(b)
    if min(a.shape[:2]) < WINDOW:
        raise ImageSizeError(f"SSIM needs both sides >= {WINDOW}, got {a.shape[:2]}")
    w, mu_a, mu_b, num1, num2, den1, den2 = _ssim_terms(a, b)
    smap = num1 * num2 / (den1 * den2)
    g = 1.0 / smap.size
    # partials of the map w.r.t. the filtered moments mu_a, E[a^2], E[ab]
    d_mu = g * (2 * mu_b * (num2 - num1) / (den1 * den2) - 2 * mu_a * smap * (1 / den1 - 1 / den2))
    d_eaa = g * (-smap / den2)
    d_eab = g * (2 * num1 / (den1 * den2))
    grad = (_filter_adjoint(d_mu, w) + 2 * a * _filter_adjoint(d_eaa, w)
            + b * _filter_adjoint(d_eab, w))
    return float(smap.mean()), grad.reshape(shape)

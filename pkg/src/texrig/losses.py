"""Image losses (L1, SSIM) and per-texel hinge regularizers, with gradients."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ImageTooSmall, ShapeMismatch

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_pair(image, target):
    image = np.asarray(image, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if image.shape != target.shape:
        raise ShapeMismatch(f"image {image.shape} vs target {target.shape}")
    return image, target


def loss_l1(image, target):
    """Mean absolute difference over pixels and channels."""
    image, target = _check_pair(image, target)
    return float(np.mean(np.abs(image - target)))


def loss_l1_grad(image, target):
    image, target = _check_pair(image, target)
    diff = image - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


_WINDOW = gaussian_window()


def _filter(x, g=_WINDOW):
    """Separable 'valid' correlation over the first two axes."""
    y = sliding_window_view(x, len(g), axis=0) @ g
    return sliding_window_view(y, len(g), axis=1) @ g


def _filter_adjoint(y, g=_WINDOW):
    k = len(g) - 1
    pad = [(k, k), (k, k)] + [(0, 0)] * (y.ndim - 2)
    return _filter(np.pad(y, pad), g[::-1])


def ssim(image, target, grad=False):
    """Mean SSIM over valid window positions and channels.

    Uses an 11x11 Gaussian window (sigma 1.5) without padding, so a constant
    image pair gives the closed-form value everywhere.
    """
    x, y = _check_pair(image, target)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if min(x.shape[:2]) < SSIM_WINDOW:
        raise ImageTooSmall(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")
    mu_x, mu_y = _filter(x), _filter(y)
    exx, eyy, exy = _filter(x * x), _filter(y * y), _filter(x * y)
    sxx = exx - mu_x ** 2
    syy = eyy - mu_y ** 2
    sxy = exy - mu_x * mu_y
    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mu_x ** 2 + mu_y ** 2 + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    value = float(smap.mean())
    if not grad:
        return value
    scale = 1.0 / smap.size
    d_a1 = scale * a2 / (b1 * b2)
    d_a2 = scale * a1 / (b1 * b2)
    d_b1 = -scale * smap / b1
    d_b2 = -scale * smap / b2
    g_mu = 2 * mu_y * d_a1 - 2 * mu_y * d_a2 + 2 * mu_x * d_b1 - 2 * mu_x * d_b2
    g_exx = d_b2
    g_exy = 2 * d_a2
    dx = _filter_adjoint(g_mu) + 2 * x * _filter_adjoint(g_exx) + y * _filter_adjoint(g_exy)
    return value, dx.reshape(np.shape(image))


def loss_ssim(image, target):
    return 1.0 - ssim(image, target)


def loss_ssim_grad(image, target):
    value, d = ssim(image, target, grad=True)
    return 1.0 - value, -d


def psnr(image, target):
    image, target = _check_pair(image, target)
    mse = float(np.mean((image - target) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)


def _hinge(values, mask, eps):
    v = values[mask]
    if v.size == 0:
        return 0.0, np.zeros_like(values)
    excess = np.maximum(np.abs(v) - eps, 0.0)
    g = np.zeros_like(values)
    g[mask] = np.where(excess > 0, np.sign(v), 0.0) / v.size
    return float(excess.mean()), g


def loss_reg_position(local, eps_mu, grad=False):
    """Mean over valid texels and components of ``max(|mu_l| - eps_mu, 0)``."""
    value, g = _hinge(local.position, local.mask, eps_mu)
    return (value, g) if grad else value


def loss_reg_scale(local, eps_s, grad=False):
    """Same hinge on activated scales ``exp(log_scale)``; gradient is wrt log-scale."""
    scale = np.exp(local.log_scale)
    value, g = _hinge(scale, local.mask, eps_s)
    return (value, g * scale) if grad else value

"""Photometric loss (L1 + SSIM) with analytic gradients, and image metrics."""
from __future__ import annotations

from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ShapeMismatch

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _gauss_taps(sigma=SSIM_SIGMA, radius=SSIM_RADIUS):
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


@lru_cache(maxsize=32)
def _filter_matrix(n: int) -> np.ndarray:
    # dense 1D operator of a reflect-padded Gaussian correlation; its transpose is the adjoint
    return correlate1d(np.eye(n), _gauss_taps(), axis=0, mode="reflect")


def _blur(img: np.ndarray) -> np.ndarray:
    Ky = _filter_matrix(img.shape[0])
    Kx = _filter_matrix(img.shape[1])
    return np.moveaxis(Ky @ np.moveaxis(img, 2, 0) @ Kx.T, 0, 2)


def _blur_adjoint(img: np.ndarray) -> np.ndarray:
    Ky = _filter_matrix(img.shape[0])
    Kx = _filter_matrix(img.shape[1])
    return np.moveaxis(Ky.T @ np.moveaxis(img, 2, 0) @ Kx, 0, 2)


def _as3(a):
    a = np.asarray(a, dtype=np.float64)
    return a[..., None] if a.ndim == 2 else a


def ssim_map(x, y, with_grad: bool = False, data_range: float = 1.0):
    """Per-pixel, per-channel SSIM with an 11-tap Gaussian window (sigma 1.5).

    With ``with_grad`` also returns a closure mapping ``dL/dmap`` to ``dL/dx``.
    """
    x, y = _as3(x), _as3(y)
    C1 = (SSIM_K1 * data_range) ** 2
    C2 = (SSIM_K2 * data_range) ** 2
    mx, my = _blur(x), _blur(y)
    sxx = _blur(x * x) - mx * mx
    syy = _blur(y * y) - my * my
    sxy = _blur(x * y) - mx * my
    A1, A2 = 2 * mx * my + C1, 2 * sxy + C2
    B1, B2 = mx * mx + my * my + C1, sxx + syy + C2
    S = A1 * A2 / (B1 * B2)
    if not with_grad:
        return S

    def backward(g):
        g = _as3(g)
        dA1 = g * A2 / (B1 * B2)
        dA2 = g * A1 / (B1 * B2)
        dB1 = -g * S / B1
        dB2 = -g * S / B2
        d_mx = 2 * my * dA1 + 2 * mx * dB1 - 2 * my * dA2 - 2 * mx * dB2
        return _blur_adjoint(d_mx) + 2 * x * _blur_adjoint(dB2) + 2 * y * _blur_adjoint(dA2)

    return S, backward


def _unwrap(img):
    return getattr(img, "rgb", img)


def rgb_loss(render, target, mask: Optional[np.ndarray] = None, lambda_rgb: float = 0.8):
    """``lambda * L1 + (1 - lambda) * (1 - SSIM)`` and its gradient w.r.t. ``render``.

    Both terms are averaged over pixels inside ``mask`` (all pixels when
    ``None``); pixels outside contribute nothing.
    """
    r = np.asarray(_unwrap(render), dtype=np.float64)
    t = np.asarray(_unwrap(target), dtype=np.float64)
    if r.shape != t.shape:
        raise ShapeMismatch(f"render {r.shape} and target {t.shape} differ")
    m = np.ones(r.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != r.shape[:2]:
        raise ShapeMismatch(f"mask {m.shape} does not match image {r.shape[:2]}")
    nch = r.shape[2] if r.ndim == 3 else 1
    count = max(int(m.sum()) * nch, 1)
    w = np.broadcast_to(m[..., None] if r.ndim == 3 else m, r.shape) / count
    diff = r - t
    l1 = float(np.sum(np.abs(diff) * w))
    S, back = ssim_map(r, t, with_grad=True)
    S = S.reshape(r.shape)
    l_ssim = 1.0 - float(np.sum(S * w))
    value = lambda_rgb * l1 + (1.0 - lambda_rgb) * l_ssim
    grad = lambda_rgb * np.sign(diff) * w - (1.0 - lambda_rgb) * back(w).reshape(r.shape)
    return value, grad


def ssim(x, y, data_range: float = 1.0) -> float:
    """Mean SSIM with the outer 5-pixel border cropped."""
    S = ssim_map(x, y, data_range=data_range)
    p = SSIM_RADIUS
    return float(S[p:-p, p:-p].mean()) if min(S.shape[:2]) > 2 * p else float(S.mean())


def psnr(x, y, mask: Optional[np.ndarray] = None, data_range: float = 1.0, cap: float = 99.0) -> float:
    x, y = _as3(x), _as3(y)
    err = (x - y) ** 2
    if mask is not None:
        err = err[np.asarray(mask, dtype=bool)]
    mse = float(np.mean(err))
    if mse <= 0:
        return cap
    return min(cap, 10.0 * np.log10(data_range**2 / mse))


def psnr_ssim(pred, target, mask: Optional[np.ndarray] = None):
    pred, target = _unwrap(pred), _unwrap(target)
    return psnr(pred, target, mask), ssim(pred, target)

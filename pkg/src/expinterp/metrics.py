"""Quality metrics on the [0, 255] scale: PSNR, SSIM and MEF-SSIM."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import ndimage

from .imgcore import ExposureImage

PSNR_IDENTICAL = 99.0
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11x11 window
K1, K2 = 0.01, 0.03
DYNAMIC_RANGE = 255.0
MEF_PATCH = 8
# structure weights are patch contrast raised to this power
MEF_STRUCTURE_POWER = 4.0
LUMA = np.array([0.299, 0.587, 0.114])


class MetricError(ValueError):
    pass


def _as_float(img) -> np.ndarray:
    data = img.data if isinstance(img, ExposureImage) else img
    return np.asarray(data, dtype=np.float64)


def _pair(a, b):
    a, b = _as_float(a), _as_float(b)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """20 log10(255 / RMSE); identical images report 99.0 dB."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_IDENTICAL
    return float(20.0 * np.log10(DYNAMIC_RANGE / np.sqrt(mse)))


def _gauss_kernel():
    x = np.arange(-SSIM_RADIUS, SSIM_RADIUS + 1, dtype=np.float64)
    k = np.exp(-x * x / (2 * SSIM_SIGMA ** 2))
    return k / k.sum()


def _gauss_filter(img):
    k = _gauss_kernel()
    out = ndimage.correlate1d(img, k, axis=0, mode="mirror")
    return ndimage.correlate1d(out, k, axis=1, mode="mirror")


def _ssim_channel(a, b):
    c1 = (K1 * DYNAMIC_RANGE) ** 2
    c2 = (K2 * DYNAMIC_RANGE) ** 2
    mu_a, mu_b = _gauss_filter(a), _gauss_filter(b)
    var_a = _gauss_filter(a * a) - mu_a ** 2
    var_b = _gauss_filter(b * b) - mu_b ** 2
    cov = _gauss_filter(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    smap = num / den
    r = SSIM_RADIUS
    if smap.shape[0] > 2 * r and smap.shape[1] > 2 * r:
        smap = smap[r:-r, r:-r]
    return float(np.mean(smap))


def ssim(a, b) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5) averaged over channels."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        return _ssim_channel(a, b)
    return float(np.mean([_ssim_channel(a[..., c], b[..., c]) for c in range(a.shape[-1])]))


def _luma(img):
    img = _as_float(img)
    return img @ LUMA if img.ndim == 3 else img


def _box_mean(img, size):
    """Mean over every size x size window (valid positions only)."""
    s = np.cumsum(np.cumsum(np.pad(img, ((1, 0), (1, 0))), axis=0), axis=1)
    total = s[size:, size:] - s[:-size, size:] - s[size:, :-size] + s[:-size, :-size]
    return total / (size * size)


def mef_desired_patch(patches: Sequence[np.ndarray]) -> np.ndarray:
    """Zero-mean desired patch from co-located input patches.

    Contrast is the largest input contrast; structure is the contrast^4
    weighted average of the unit-norm input structures, renormalized.
    """
    stack = np.stack([np.asarray(p, dtype=np.float64).ravel() for p in patches])
    centred = stack - stack.mean(axis=1, keepdims=True)
    contrast = np.linalg.norm(centred, axis=1)
    unit = np.divide(centred, contrast[:, None], out=np.zeros_like(centred),
                     where=contrast[:, None] > 0)
    w = contrast ** MEF_STRUCTURE_POWER
    if w.sum() == 0:
        return np.zeros(np.shape(patches[0]))
    s_bar = (w[:, None] * unit).sum(axis=0) / w.sum()
    norm = np.linalg.norm(s_bar)
    s_hat = s_bar / norm if norm > 0 else s_bar
    return (contrast.max() * s_hat).reshape(np.shape(patches[0]))


def mef_ssim(fused, inputs: Sequence) -> float:
    """Single-scale MEF-SSIM over 8x8 patches at stride 1, on luma.

    Every patch position gets a desired patch from the inputs (see
    :func:`mef_desired_patch`) and is scored with the SSIM structure term
    (2 cov + C2) / (var_desired + var_fused + C2); the result is the mean.
    """
    if len(inputs) < 2:
        raise MetricError("MEF-SSIM needs at least 2 input exposures")
    f = _luma(fused)
    xs = [_luma(x) for x in inputs]
    for x in xs:
        if x.shape != f.shape:
            raise MetricError(f"shape mismatch: {x.shape} vs {f.shape}")
    if min(f.shape) < MEF_PATCH:
        raise MetricError(f"images must be at least {MEF_PATCH}x{MEF_PATCH}")
    n = MEF_PATCH * MEF_PATCH
    c2 = (K2 * DYNAMIC_RANGE) ** 2
    box = lambda img: _box_mean(img, MEF_PATCH)  # noqa: E731

    mu_f = box(f)
    var_f = np.maximum(box(f * f) - mu_f ** 2, 0.0)
    mus = [box(x) for x in xs]
    k = len(xs)
    # covariances among inputs and with the fused image (per patch, 1/n normalized)
    cov_xx = np.empty((k, k) + mu_f.shape)
    for i in range(k):
        for j in range(i, k):
            c = box(xs[i] * xs[j]) - mus[i] * mus[j]
            cov_xx[i, j] = cov_xx[j, i] = c
    cov_xf = np.stack([box(x * f) - m * mu_f for x, m in zip(xs, mus)])
    var_x = np.maximum(np.stack([cov_xx[i, i] for i in range(k)]), 0.0)
    contrast = np.sqrt(n * var_x)  # ||x - mu||
    w = contrast ** MEF_STRUCTURE_POWER
    inv_c = np.divide(1.0, contrast, out=np.zeros_like(contrast), where=contrast > 0)
    a = w * inv_c  # coefficient of (x_k - mu_k) in the unnormalized structure
    wsum = w.sum(axis=0)
    # ||sum_k a_k (x_k - mu_k)||^2 and <sum_k a_k (x_k - mu_k), f - mu_f>
    s_norm2 = n * np.einsum("i...,ij...,j...->...", a, cov_xx, a)
    s_dot_f = n * np.einsum("i...,i...->...", a, cov_xf)
    c_hat = contrast.max(axis=0)
    s_norm = np.sqrt(np.maximum(s_norm2, 0.0))
    ok = (wsum > 0) & (s_norm > 0)
    scale = np.divide(c_hat, s_norm, out=np.zeros_like(c_hat), where=ok)
    var_hat = np.where(ok, c_hat ** 2 / n, 0.0)
    cov_hat = scale * s_dot_f / n
    score = (2 * cov_hat + c2) / (var_hat + var_f + c2)
    return float(np.mean(score))

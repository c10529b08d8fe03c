"""Training losses with analytic gradients.

All functions take channel-last arrays ``(..., H, W, 3)`` (a single image or a
batch) and reduce with a mean, so values do not depend on resolution.  Every
``*_grad`` function returns the gradient with respect to the prediction (or
the residual, which is the same thing since prediction = y0 + residual).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# norms below this count as black pixels for the colour-angle loss
ANGLE_EPS = 1e-6


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class PsiParams:
    """Hybrid L1/L2 threshold; 5.0 on the [0, 255] scale (5/255 on [0, 1])."""

    c: float = 5.0

    def __post_init__(self):
        if not self.c > 0:
            raise LossError(f"psi threshold must be positive, got {self.c}")

    def rescaled(self, scale: float) -> "PsiParams":
        return PsiParams(self.c * scale)


@dataclass(frozen=True)
class LossWeights:
    w_c: float = 0.01
    w_f: float = 0.01

    def __post_init__(self):
        if self.w_c < 0 or self.w_f < 0:
            raise LossError("loss weights must be non-negative")


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise LossError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


# --- hybrid L1/L2 -------------------------------------------------------------

def psi(z, p: PsiParams = PsiParams()):
    """|z| outside [-c, c], (z^2 + c^2) / (2c) inside."""
    z = np.asarray(z, dtype=np.float64)
    a = np.abs(z)
    return np.where(a > p.c, a, (z * z + p.c * p.c) / (2 * p.c))


def psi_prime(z, p: PsiParams = PsiParams()):
    z = np.asarray(z, dtype=np.float64)
    return np.where(np.abs(z) >= p.c, np.sign(z), z / p.c)


def reconstruction_loss(y, y0, residual, p: PsiParams = PsiParams()) -> float:
    y, y0 = _pair(y, y0)
    y, residual = _pair(y, residual)
    return float(np.mean(psi(y - y0 - residual, p)))


def reconstruction_loss_grad(y, y0, residual, p: PsiParams = PsiParams()) -> np.ndarray:
    y, y0 = _pair(y, y0)
    y, residual = _pair(y, residual)
    d = y - y0 - residual
    return -psi_prime(d, p) / d.size


def l1_loss(y, prediction) -> float:
    y, prediction = _pair(y, prediction)
    return float(np.mean(np.abs(y - prediction)))


def l1_loss_grad(y, prediction) -> np.ndarray:
    y, prediction = _pair(y, prediction)
    return -np.sign(y - prediction) / y.size


def l2_loss(y, prediction) -> float:
    """Root-mean-square difference."""
    y, prediction = _pair(y, prediction)
    return float(np.sqrt(np.mean((y - prediction) ** 2)))


def l2_loss_grad(y, prediction) -> np.ndarray:
    y, prediction = _pair(y, prediction)
    d = y - prediction
    rms = np.sqrt(np.mean(d * d))
    if rms == 0:
        return np.zeros_like(d)
    return -d / (d.size * rms)


# --- colour angle -------------------------------------------------------------

def _angle_parts(a, b):
    cross = np.cross(a, b)
    s = np.linalg.norm(cross, axis=-1)
    d = np.sum(a * b, axis=-1)
    valid = (np.linalg.norm(a, axis=-1) >= ANGLE_EPS) & (np.linalg.norm(b, axis=-1) >= ANGLE_EPS)
    return cross, s, d, valid


def color_loss(y, prediction) -> float:
    """Mean angle between RGB vectors; black pixels contribute 0."""
    y, prediction = _pair(y, prediction)
    if y.shape[-1] != 3:
        raise LossError("colour loss needs 3-channel images")
    _, s, d, valid = _angle_parts(y, prediction)
    # atan2 stays accurate for nearly parallel vectors, unlike arccos
    return float(np.mean(np.where(valid, np.arctan2(s, d), 0.0)))


def color_loss_grad(y, prediction) -> np.ndarray:
    y, prediction = _pair(y, prediction)
    cross, s, d, valid = _angle_parts(y, prediction)
    n_pix = s.size
    ok = valid & (s > 1e-12)
    safe_s = np.where(ok, s, 1.0)[..., None]
    ds = np.cross(cross, y) / safe_s
    denom = (s * s + d * d)[..., None]
    grad = (d[..., None] * ds - s[..., None] * y) / np.where(denom > 0, denom, 1.0)
    return np.where(ok[..., None], grad, 0.0) / n_pix


# --- feature loss -------------------------------------------------------------

def _reflect_pad(x, p):
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), mode="reflect")


def _reflect_pad_adjoint(g, p):
    """Adjoint of reflect-101 padding by ``p`` on axes 1 and 2."""
    for axis in (1, 2):
        n = g.shape[axis] - 2 * p
        core = np.take(g, np.arange(p, p + n), axis=axis).copy()
        for k in range(p):
            # padded index p-1-k mirrors source k+1; index p+n+k mirrors n-2-k
            src_lo = np.take(g, [p - 1 - k], axis=axis)
            src_hi = np.take(g, [p + n + k], axis=axis)
            idx_lo = [slice(None)] * g.ndim
            idx_hi = [slice(None)] * g.ndim
            idx_lo[axis] = slice(k + 1, k + 2)
            idx_hi[axis] = slice(n - 2 - k, n - 1 - k)
            core[tuple(idx_lo)] += src_lo
            core[tuple(idx_hi)] += src_hi
        g = core
    return g


def conv2d_same(x, kernel):
    """'Same' correlation with reflect padding. x (N,H,W,Ci), kernel (k,k,Ci,Co)."""
    k = kernel.shape[0]
    p = k // 2
    xp = _reflect_pad(x, p)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (N,H,W,Ci,k,k)
    return np.einsum("nhwcij,ijcd->nhwd", win, kernel, optimize=True)


def conv2d_same_backward(gout, kernel, in_shape):
    k = kernel.shape[0]
    p = k // 2
    n, h, w, _ = in_shape
    gxp = np.zeros((n, h + 2 * p, w + 2 * p, kernel.shape[2]))
    for i in range(k):
        for j in range(k):
            gxp[:, i:i + h, j:j + w, :] += gout @ kernel[i, j].T
    return _reflect_pad_adjoint(gxp, p)


def _avgpool2(x):
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    return x[:, :2 * h2, :2 * w2].reshape(n, h2, 2, w2, 2, c).mean(axis=(2, 4))


def _avgpool2_backward(g, in_shape):
    n, h, w, c = in_shape
    out = np.zeros(in_shape)
    h2, w2 = g.shape[1], g.shape[2]
    spread = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0
    out[:, :2 * h2, :2 * w2] = spread
    return out


@dataclass
class FeatureExtractor:
    """Fixed random-kernel conv stack standing in for a pretrained VGG.

    Layer ``j`` convolves, the next layer sees ReLU then 2x2 average pooling.
    The feature maps are the pre-activation conv outputs.  Nothing here is
    trainable; kernels are drawn once from ``seed``.
    """

    kernels: List[np.ndarray] = field(default_factory=list)
    seed: Optional[int] = None

    @classmethod
    def random(cls, seed: int = 1234, channels: Sequence[int] = (8, 16, 16),
               size: int = 3) -> "FeatureExtractor":
        rng = np.random.default_rng(seed)
        kernels, c_in = [], 3
        for c_out in channels:
            std = np.sqrt(2.0 / (size * size * c_in))
            kernels.append(rng.normal(0.0, std, (size, size, c_in, c_out)))
            c_in = c_out
        return cls(kernels, seed)

    @classmethod
    def identity(cls) -> "FeatureExtractor":
        k = np.zeros((3, 3, 3, 3))
        k[1, 1] = np.eye(3)
        return cls([k])

    def _forward(self, x):
        batched = x.ndim == 4
        h = x if batched else x[None]
        feats, cache = [], []
        for j, kernel in enumerate(self.kernels):
            if j:
                pre = feats[-1]
                act = np.maximum(pre, 0.0)
                pooled = _avgpool2(act)
                cache.append((pre.shape, pre > 0))
                h = pooled
            feats.append(conv2d_same(h, kernel))
            cache.append(h.shape)
        return feats, cache, batched

    def features(self, x) -> List[np.ndarray]:
        feats, _, batched = self._forward(np.asarray(x, dtype=np.float64))
        return feats if batched else [f[0] for f in feats]

    def backward(self, x, feature_grads: List[np.ndarray]) -> np.ndarray:
        """Gradient w.r.t. the input given gradients w.r.t. each feature map."""
        feats, cache, batched = self._forward(np.asarray(x, dtype=np.float64))
        # cache alternates: in_shape(0), (pre_shape, mask)(1), in_shape(1), ...
        grad = None
        for j in reversed(range(len(self.kernels))):
            g_feat = feature_grads[j] if batched else feature_grads[j][None]
            if grad is not None:
                g_feat = g_feat + grad
            g_in = conv2d_same_backward(g_feat, self.kernels[j], cache[2 * j])
            if j:
                pre_shape, mask = cache[2 * j - 1]
                grad = _avgpool2_backward(g_in, pre_shape) * mask
            else:
                grad = g_in
        return grad if batched else grad[0]


def feature_loss(fx: FeatureExtractor, y, prediction) -> float:
    """Mean over layers of the mean squared feature-map difference."""
    y, prediction = _pair(y, prediction)
    fy = fx.features(y)
    fp = fx.features(prediction)
    return float(np.mean([np.mean((a - b) ** 2) for a, b in zip(fy, fp)]))


def feature_loss_grad(fx: FeatureExtractor, y, prediction) -> np.ndarray:
    y, prediction = _pair(y, prediction)
    fy = fx.features(y)
    fp = fx.features(prediction)
    n_layers = len(fy)
    seeds = [-2.0 * (a - b) / (a.size * n_layers) for a, b in zip(fy, fp)]
    return fx.backward(prediction, seeds)


# --- composite ----------------------------------------------------------------

RECON_KINDS = ("hybrid", "l1", "l2")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    l_r: float
    l_c: float
    l_f: float

    def as_dict(self):
        return {"l_d": self.total, "l_r": self.l_r, "l_c": self.l_c, "l_f": self.l_f}


def _recon(kind, y, y0, residual, p):
    if kind == "hybrid":
        return reconstruction_loss(y, y0, residual, p), reconstruction_loss_grad(y, y0, residual, p)
    pred = np.asarray(y0) + np.asarray(residual)
    if kind == "l1":
        return l1_loss(y, pred), l1_loss_grad(y, pred)
    if kind == "l2":
        return l2_loss(y, pred), l2_loss_grad(y, pred)
    raise LossError(f"unknown reconstruction loss {kind!r}")


def composite_loss_grad(y, y0, residual, p: PsiParams = PsiParams(),
                        w: LossWeights = LossWeights(),
                        fx: Optional[FeatureExtractor] = None, recon: str = "hybrid"):
    """L_r + w_c L_c + w_f L_f and its gradient w.r.t. ``residual``."""
    y, y0 = _pair(y, y0)
    y, residual = _pair(y, residual)
    with np.errstate(invalid="ignore", over="ignore"):
        return _composite_loss_grad(y, y0, residual, p, w, fx, recon)


def _composite_loss_grad(y, y0, residual, p, w, fx, recon):
    pred = y0 + residual
    l_r, grad = _recon(recon, y, y0, residual, p)
    l_c = color_loss(y, pred)
    if w.w_c:
        grad = grad + w.w_c * color_loss_grad(y, pred)
    l_f = 0.0
    if fx is not None:
        l_f = feature_loss(fx, y, pred)
        if w.w_f:
            grad = grad + w.w_f * feature_loss_grad(fx, y, pred)
    total = l_r + w.w_c * l_c + w.w_f * l_f
    if not np.isfinite(total):
        raise LossError(f"non-finite loss (l_r={l_r}, l_c={l_c}, l_f={l_f})")
    return LossBreakdown(total, l_r, l_c, l_f), grad


def composite_loss(y, y0, residual, p: PsiParams = PsiParams(), w: LossWeights = LossWeights(),
                   fx: Optional[FeatureExtractor] = None, recon: str = "hybrid") -> LossBreakdown:
    y, y0 = _pair(y, y0)
    y, residual = _pair(y, residual)
    pred = y0 + residual
    l_r = _recon(recon, y, y0, residual, p)[0]
    l_c = color_loss(y, pred)
    l_f = feature_loss(fx, y, pred) if fx is not None else 0.0
    return LossBreakdown(l_r + w.w_c * l_c + w.w_f * l_f, l_r, l_c, l_f)

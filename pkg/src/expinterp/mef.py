"""Multi-scale exposure fusion with contrast/saturation/well-exposedness weights."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .imgcore import (ExposureImage, collapse, gaussian_pyramid, laplacian_pyramid,
                      max_levels, quantize, Pyramid)

WEIGHT_EPS = 1e-12
_LAPLACE = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class MefParams:
    contrast: float = 1.0
    saturation: float = 1.0
    exposedness: float = 1.0
    sigma: float = 0.2
    levels: Optional[int] = None  # None = floor(log2(min dim)) - 1

    def __post_init__(self):
        if min(self.contrast, self.saturation, self.exposedness) < 0:
            raise FusionError("quality exponents must be non-negative")
        if self.levels is not None and self.levels < 1:
            raise FusionError("pyramid levels must be >= 1")

    def resolve_levels(self, height: int, width: int) -> int:
        if self.levels is not None:
            return self.levels
        return max(1, int(np.floor(np.log2(min(height, width)))) - 1)


def _stack_arrays(stack: Sequence) -> List[np.ndarray]:
    if len(stack) == 0:
        raise FusionError("empty exposure stack")
    arrays = [np.asarray(im.data if isinstance(im, ExposureImage) else im, dtype=np.float64)
              for im in stack]
    if len({a.shape for a in arrays}) != 1:
        raise FusionError("all exposures must share the same dimensions")
    return arrays


def quality_map(img: np.ndarray, p: MefParams) -> np.ndarray:
    """Unnormalized per-pixel weight of one exposure (codes in [0, 255])."""
    x = img / 255.0
    gray = x.mean(axis=2)
    contrast = np.abs(ndimage.correlate(gray, _LAPLACE, mode="mirror"))
    saturation = x.std(axis=2)
    wellexp = np.prod(np.exp(-0.5 * (x - 0.5) ** 2 / p.sigma ** 2), axis=2)
    return contrast ** p.contrast * saturation ** p.saturation * wellexp ** p.exposedness


def mef_weights(stack: Sequence, p: MefParams = MefParams()) -> List[np.ndarray]:
    """Quality weights normalized to sum to one at every pixel."""
    arrays = _stack_arrays(stack)
    raw = [quality_map(a, p) + WEIGHT_EPS for a in arrays]
    total = np.sum(raw, axis=0)
    return [w / total for w in raw]


def fuse_mef_float(stack: Sequence, p: MefParams = MefParams()) -> np.ndarray:
    arrays = _stack_arrays(stack)
    h, w = arrays[0].shape[:2]
    levels = p.resolve_levels(h, w)
    if levels > max_levels(h, w):
        raise FusionError(f"{levels} pyramid levels too deep for {w}x{h} images")
    weights = mef_weights(arrays, p)
    fused = None
    for img, wmap in zip(arrays, weights):
        lap = laplacian_pyramid(img, levels).levels
        gw = gaussian_pyramid(wmap, levels).levels
        blended = [band * g[..., None] for band, g in zip(lap, gw)]
        fused = blended if fused is None else [f + b for f, b in zip(fused, blended)]
    return collapse(Pyramid(fused, "laplacian"))


def fuse_mef(stack: Sequence, p: MefParams = MefParams()) -> np.ndarray:
    """Fuse exposures and return uint8 codes."""
    return quantize(fuse_mef_float(stack, p))

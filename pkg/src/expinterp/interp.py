"""Model-driven synthesis of the medium-exposure image y0.

Both exposures are mapped to the medium exposure through their IMFs and
blended per pixel and channel with smoothstep reliability weights computed
from the original codes: ``w_low`` fades out under-exposed codes of the short
exposure, ``w_high`` fades out over-exposed codes of the long exposure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .imf import CrfModel, ImfTable, estimate_pair_imf, medium_imfs, medium_imfs_from_crf
from .imgcore import ExposureImage

# inner knots of the weight ramps (code values)
LOW_KNEE = 55.0
HIGH_KNEE = 200.0


class InterpError(ValueError):
    pass


@dataclass(frozen=True)
class WeightParams:
    xi_l: float = 25.0
    xi_u: float = 230.0

    def __post_init__(self):
        if not 0 <= self.xi_l < LOW_KNEE:
            raise InterpError(f"xi_l must lie in [0, 55), got {self.xi_l}")
        if not HIGH_KNEE < self.xi_u <= 255:
            raise InterpError(f"xi_u must lie in (200, 255], got {self.xi_u}")


def _smoothstep_down(h):
    return 1.0 - 3.0 * h * h + 2.0 * h ** 3


def weight_w1(z, params: WeightParams = WeightParams()):
    """0 below xi_l, smoothstep up to 1 at code 55, 1 above."""
    z = np.asarray(z, dtype=np.float64)
    h = (LOW_KNEE - z) / (LOW_KNEE - params.xi_l)
    return np.where(z < params.xi_l, 0.0, np.where(z < LOW_KNEE, _smoothstep_down(h), 1.0))


def weight_w2(z, params: WeightParams = WeightParams()):
    """1 below code 200, smoothstep down to 0 at xi_u, 0 above."""
    z = np.asarray(z, dtype=np.float64)
    h = (z - HIGH_KNEE) / (params.xi_u - HIGH_KNEE)
    return np.where(z < HIGH_KNEE, 1.0, np.where(z < params.xi_u, _smoothstep_down(h), 0.0))


def synthesize_intermediate(dark: ExposureImage, bright: ExposureImage,
                            dark_to_mid: ImfTable, bright_to_mid: ImfTable,
                            params: WeightParams = WeightParams()) -> np.ndarray:
    """Weighted average of the two mapped exposures.

    Where both weights vanish the unweighted mean of the two mapped values
    is used instead.
    """
    d = dark.data if isinstance(dark, ExposureImage) else np.asarray(dark)
    b = bright.data if isinstance(bright, ExposureImage) else np.asarray(bright)
    if d.shape != b.shape:
        raise InterpError(f"image sizes differ: {d.shape} vs {b.shape}")
    mapped_d = dark_to_mid.apply(d)
    mapped_b = bright_to_mid.apply(b)
    w_d = weight_w1(d, params)
    w_b = weight_w2(b, params)
    total = w_d + w_b
    safe = np.where(total > 0, total, 1.0)
    # written as an offset from one branch so equal mapped values come out exact
    blended = mapped_b + (w_d / safe) * (mapped_d - mapped_b)
    return np.where(total > 0, blended, 0.5 * (mapped_d + mapped_b))


@dataclass(frozen=True)
class Interpolation:
    y0: np.ndarray
    dark_to_mid: ImfTable
    bright_to_mid: ImfTable
    dark_to_bright: Optional[ImfTable] = None


def interpolate_pair(dark: ExposureImage, bright: ExposureImage,
                     params: WeightParams = WeightParams(),
                     crf: Optional[CrfModel] = None) -> Interpolation:
    """Full model-driven step: IMFs (pair-based, or from a known CRF) then y0."""
    if crf is not None:
        d2m, b2m = medium_imfs_from_crf(crf, dark.exposure_time, bright.exposure_time)
        d2b = None
    else:
        d2b = estimate_pair_imf(dark, bright)
        d2m, b2m = medium_imfs(d2b)
    y0 = synthesize_intermediate(dark, bright, d2m, b2m, params)
    return Interpolation(y0, d2m, b2m, d2b)

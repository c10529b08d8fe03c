"""Exposure interpolation: synthesize a medium exposure from a dark/bright pair.

The pipeline estimates intensity mapping functions, blends the two mapped
exposures into an initial estimate ``y0``, optionally refines it with a small
residual CNN, and fuses the three-image stack with multi-scale exposure fusion.
"""

__version__ = "0.1.0"

from .imgcore import ExposureImage, ImageError, quantize, read_image, write_image
from .imf import CrfModel, ImfTable, estimate_pair_imf, functional_sqrt, medium_imfs
from .interp import WeightParams, interpolate_pair, synthesize_intermediate
from .mef import MefParams, fuse_mef
from .metrics import mef_ssim, psnr, ssim

__all__ = [
    "CrfModel", "ExposureImage", "ImageError", "ImfTable", "MefParams", "WeightParams",
    "estimate_pair_imf", "functional_sqrt", "fuse_mef", "interpolate_pair", "medium_imfs",
    "mef_ssim", "psnr", "quantize", "read_image", "ssim", "synthesize_intermediate",
    "write_image",
]

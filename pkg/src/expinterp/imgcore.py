"""Image containers, quantization, pyramids and image file I/O.

Float images are plain ``float64`` arrays of shape ``(H, W, 3)`` holding code
values on the [0, 255] scale (not clamped).  8-bit exposures carry their
exposure time in :class:`ExposureImage`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

# 5-tap binomial kernel used for both reduce and expand
_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


class ImageError(ValueError):
    """Raised for malformed image data or unreadable image files."""


@dataclass(frozen=True)
class ExposureImage:
    """8-bit RGB exposure with its exposure time in seconds."""

    data: np.ndarray
    exposure_time: float

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ImageError(f"expected (H, W, 3) pixel data, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if np.any(arr < 0) or np.any(arr > 255) or np.any(arr != np.round(arr)):
                raise ImageError("pixel codes must be integers in [0, 255]")
            arr = arr.astype(np.uint8)
        if not (np.isfinite(self.exposure_time) and self.exposure_time > 0):
            raise ImageError(f"exposure time must be > 0, got {self.exposure_time}")
        arr = np.array(arr, copy=True)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "exposure_time", float(self.exposure_time))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class Pyramid:
    levels: List[np.ndarray] = field(default_factory=list)
    kind: str = "gaussian"

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, idx):
        return self.levels[idx]


def to_float(img) -> np.ndarray:
    """Embed 8-bit codes as float64 code values."""
    data = img.data if isinstance(img, ExposureImage) else np.asarray(img)
    return data.astype(np.float64)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round half away from zero, clamp to [0, 255] and return uint8 codes."""
    arr = np.asarray(img, dtype=np.float64)
    if np.isnan(arr).any():
        raise ImageError("cannot quantize NaN values")
    rounded = np.sign(arr) * np.floor(np.abs(arr) + 0.5)
    return np.clip(rounded, 0, 255).astype(np.uint8)


def _check_finite(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ImageError("float image contains NaN or Inf")
    return arr


def _blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # scipy's "mirror" mode is reflect-101 (edge sample not repeated)
    out = ndimage.correlate1d(img, kernel, axis=0, mode="mirror")
    return ndimage.correlate1d(out, kernel, axis=1, mode="mirror")


def pyr_down(img: np.ndarray) -> np.ndarray:
    return _blur(img, _KERNEL)[::2, ::2]


def pyr_up(img: np.ndarray, shape) -> np.ndarray:
    """Zero-insert ``img`` into ``shape`` and interpolate with the 2x kernel."""
    up = np.zeros(tuple(shape[:2]) + img.shape[2:], dtype=np.float64)
    up[::2, ::2] = img
    return _blur(up, 2.0 * _KERNEL)


def max_levels(height: int, width: int) -> int:
    """Deepest pyramid allowed: min(H, W) >= 2**(levels - 1)."""
    return int(np.floor(np.log2(min(height, width)))) + 1


def _check_levels(img: np.ndarray, levels: int):
    if levels < 1:
        raise ImageError(f"levels must be >= 1, got {levels}")
    h, w = img.shape[:2]
    if min(h, w) < 2 ** (levels - 1):
        raise ImageError(
            f"{levels} levels too deep for a {w}x{h} image (max {max_levels(h, w)})")


def gaussian_pyramid(img: np.ndarray, levels: int) -> Pyramid:
    arr = _check_finite(img)
    _check_levels(arr, levels)
    out = [arr]
    for _ in range(levels - 1):
        out.append(pyr_down(out[-1]))
    return Pyramid(out, "gaussian")


def laplacian_pyramid(img: np.ndarray, levels: int) -> Pyramid:
    gauss = gaussian_pyramid(img, levels).levels
    out = [g - pyr_up(g_next, g.shape) for g, g_next in zip(gauss[:-1], gauss[1:])]
    out.append(gauss[-1])
    return Pyramid(out, "laplacian")


def collapse(pyr: Pyramid) -> np.ndarray:
    """Invert :func:`laplacian_pyramid` with the same expand operator."""
    if pyr.kind != "laplacian":
        raise ImageError("collapse expects a laplacian pyramid")
    img = pyr.levels[-1]
    for band in reversed(pyr.levels[:-1]):
        img = band + pyr_up(img, band.shape)
    return img


# --- file I/O -------------------------------------------------------------

def read_image(path) -> np.ndarray:
    """Read an 8-bit PNG or binary PPM as a (H, W, 3) uint8 array."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "L", "P", "RGBA"):
                raise ImageError(f"{path}: unsupported image mode {im.mode}")
            return np.array(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise ImageError(f"{path}: {exc}") from exc


def write_image(path, codes: np.ndarray) -> None:
    """Write uint8 codes as PNG or PPM depending on the file suffix."""
    path = Path(path)
    arr = np.asarray(codes)
    if arr.dtype != np.uint8:
        arr = quantize(arr)
    fmt = {".png": "PNG", ".ppm": "PPM"}.get(path.suffix.lower())
    if fmt is None:
        raise ImageError(f"{path}: unsupported image suffix (use .png or .ppm)")
    Image.fromarray(arr, mode="RGB").save(path, format=fmt)


def load_exposure(path, exposure_time: float) -> ExposureImage:
    return ExposureImage(read_image(path), exposure_time)


def write_pfm(path, img: np.ndarray) -> None:
    """Little-endian colour PFM (scale -1.0), rows stored bottom to top."""
    arr = _check_finite(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageError(f"PFM writer expects (H, W, 3), got {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr[::-1], dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise ImageError(f"{path}: not a PFM file")
        channels = 3 if header == b"PF" else 1
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        raw = np.frombuffer(fh.read(), dtype=dtype)
    if raw.size != w * h * channels:
        raise ImageError(f"{path}: truncated PFM payload")
    arr = raw.reshape(h, w, channels)[::-1].astype(np.float64)
    if channels == 1:
        arr = np.repeat(arr, 3, axis=2)
    return arr


def same_shape(images: Sequence) -> bool:
    shapes = {np.shape(im.data if isinstance(im, ExposureImage) else im) for im in images}
    return len(shapes) == 1

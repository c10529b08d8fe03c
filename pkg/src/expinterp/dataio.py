"""Exposure stacks on disk, synthetic oracle scenes and dataset splits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .imf import CrfModel
from .imgcore import ExposureImage, ImageError, quantize, read_image, write_image, write_pfm

MANIFEST_NAME = "exposures.csv"
ROLES = ("dark", "medium", "bright")


class StackError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRow:
    filename: str
    exposure_time: float
    role: str


@dataclass(frozen=True)
class Stack:
    dark: ExposureImage
    bright: ExposureImage
    medium: Optional[ExposureImage] = None
    directory: Optional[Path] = None

    @property
    def ratio(self) -> float:
        return self.bright.exposure_time / self.dark.exposure_time

    @property
    def medium_time(self) -> float:
        """Geometric-mean exposure time of the virtual medium image."""
        return math.sqrt(self.dark.exposure_time * self.bright.exposure_time)


def read_manifest(path) -> List[ManifestRow]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(str(path))
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["filename", "exposure_time", "role"]:
            raise StackError(f"{path}: header must be filename,exposure_time,role")
        rows = [ManifestRow(r["filename"], float(r["exposure_time"]), r["role"].strip())
                for r in reader]
    _validate_rows(rows, path)
    return rows


def write_manifest(path, rows: Sequence[ManifestRow]) -> None:
    _validate_rows(rows, path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["filename", "exposure_time", "role"])
        for row in rows:
            writer.writerow([row.filename, repr(float(row.exposure_time)), row.role])


def _validate_rows(rows, path):
    roles = [r.role for r in rows]
    if len(set(roles)) != len(roles):
        raise StackError(f"{path}: roles must be unique per stack")
    unknown = set(roles) - set(ROLES)
    if unknown:
        raise StackError(f"{path}: unknown roles {sorted(unknown)}")
    if "dark" not in roles or "bright" not in roles:
        raise StackError(f"{path}: manifest needs dark and bright rows")
    for r in rows:
        if not r.exposure_time > 0:
            raise StackError(f"{path}: non-positive exposure time for {r.filename}")
    times = {r.role: r.exposure_time for r in rows}
    if not times["bright"] > times["dark"]:
        raise StackError(f"{path}: bright/dark exposure ratio must exceed 1")
    if "medium" in times and not times["dark"] < times["medium"] < times["bright"]:
        raise StackError(f"{path}: medium exposure must lie between dark and bright")


def load_stack(manifest_path) -> Stack:
    """Load (dark, medium or None, bright) with exposure times attached."""
    manifest_path = Path(manifest_path)
    directory = manifest_path if manifest_path.is_dir() else manifest_path.parent
    rows = read_manifest(manifest_path)
    images = {}
    for row in rows:
        images[row.role] = ExposureImage(read_image(directory / row.filename), row.exposure_time)
    shapes = {img.shape for img in images.values()}
    if len(shapes) != 1:
        raise StackError(f"{directory}: image dimensions differ {sorted(shapes)}")
    return Stack(images["dark"], images["bright"], images.get("medium"), directory)


def save_stack(directory, stack: Stack, ext: str = ".png") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for role in ROLES:
        img = getattr(stack, role)
        if img is None:
            continue
        name = f"{role}{ext}"
        write_image(directory / name, img.data)
        rows.append(ManifestRow(name, img.exposure_time, role))
    write_manifest(directory / MANIFEST_NAME, rows)
    return directory / MANIFEST_NAME


# --- synthetic scenes ---------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    width: int = 128
    height: int = 128
    gamma: float = 2.2
    ratio: float = 16.0
    noise: float = 1.0

    def __post_init__(self):
        if not self.ratio > 1:
            raise StackError("synthetic exposure ratio must exceed 1")
        if not self.gamma > 0:
            raise StackError("CRF gamma must be positive")
        if self.width < 8 or self.height < 8:
            raise StackError("synthetic scenes must be at least 8x8")


@dataclass(frozen=True)
class SynthScene:
    dark: ExposureImage
    truth: ExposureImage
    bright: ExposureImage
    radiance: np.ndarray
    crf: CrfModel
    medium: ExposureImage

    def __iter__(self):
        # (x2, y_truth, x1, radiance_map, crf) unpacking order
        return iter((self.dark, self.truth, self.bright, self.radiance, self.crf))

    @property
    def stack(self) -> Stack:
        return Stack(self.dark, self.bright, self.medium)


def _value_noise(rng, shape, cells):
    """Smooth random field: a coarse random grid upsampled bilinearly."""
    h, w = shape
    grid = rng.standard_normal((cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    # smoothstep fade avoids visible grid creases
    fy, fx = fy * fy * (3 - 2 * fy), fx * fx * (3 - 2 * fx)
    g00 = grid[np.ix_(y0, x0)]
    g01 = grid[np.ix_(y0, x0 + 1)]
    g10 = grid[np.ix_(y0 + 1, x0)]
    g11 = grid[np.ix_(y0 + 1, x0 + 1)]
    return (g00 * (1 - fx) + g01 * fx) * (1 - fy) + (g10 * (1 - fx) + g11 * fx) * fy


def synth_radiance(cfg: SynthConfig) -> np.ndarray:
    """Procedural radiance map (H, W, 3); exposure 1.0 saturates the sensor.

    log10 radiance spans roughly [-4, 0.5]: a diagonal gradient, random
    tinted disks and boxes (including a deep-shadow box and a highlight
    disk) and a few octaves of value noise for texture.
    """
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= h - 1
    xx /= w - 1
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)
    log_e = -1.8 + 2.4 * ramp
    tint = np.ones((h, w, 3))

    for _ in range(rng.integers(4, 8)):
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.06, 0.25)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        log_e = np.where(mask, log_e + rng.uniform(-1.2, 1.2), log_e)
        tint[mask] *= rng.uniform(0.6, 1.4, 3)
    for _ in range(rng.integers(2, 5)):
        y0, x0 = rng.uniform(0, 0.8, 2)
        bh, bw = rng.uniform(0.1, 0.3, 2)
        mask = (yy >= y0) & (yy < y0 + bh) & (xx >= x0) & (xx < x0 + bw)
        log_e = np.where(mask, rng.uniform(-3.0, -0.5) + 0.6 * ramp, log_e)
        tint[mask] *= rng.uniform(0.7, 1.3, 3)

    # guaranteed deep shadow and highlight so both fusion weight ramps are hit
    sy, sx = rng.uniform(0.05, 0.6, 2)
    shadow = (yy >= sy) & (yy < sy + 0.3) & (xx >= sx) & (xx < sx + 0.3)
    log_e = np.where(shadow, -3.9 + 0.8 * (xx - sx), log_e)
    hy, hx = rng.uniform(0.2, 0.8, 2)
    highlight = (yy - hy) ** 2 + (xx - hx) ** 2 < 0.12 ** 2
    log_e = np.where(highlight, -0.3 + 0.8 * (1 - np.hypot(yy - hy, xx - hx) / 0.12), log_e)

    texture = sum(_value_noise(rng, (h, w), cells) * amp
                  for cells, amp in ((4, 0.25), (16, 0.12), (48, 0.06)))
    log_e = log_e + texture
    radiance = 10.0 ** log_e[..., None] * tint
    return np.clip(radiance, 0.0, None)


def _capture(crf: CrfModel, radiance, exposure_time, noise, rng):
    codes = quantize(crf.expose(radiance * exposure_time)).astype(np.float64)
    if noise > 0:
        codes = codes + rng.normal(0.0, noise, codes.shape)
    return ExposureImage(quantize(codes), exposure_time)


def synth_scene(cfg: SynthConfig, radiance: Optional[np.ndarray] = None) -> SynthScene:
    """Render dark (t=1), medium (t=sqrt(ratio)) and bright (t=ratio) exposures.

    Captures get additive Gaussian noise in code space after quantization;
    ``truth`` is the noise-free medium exposure.
    """
    crf = CrfModel.gamma(cfg.gamma)
    if radiance is None:
        radiance = synth_radiance(cfg)
    noise_rng = np.random.default_rng([cfg.seed, 1])
    t_dark, t_bright = 1.0, float(cfg.ratio)
    t_mid = math.sqrt(t_dark * t_bright)
    dark = _capture(crf, radiance, t_dark, cfg.noise, noise_rng)
    bright = _capture(crf, radiance, t_bright, cfg.noise, noise_rng)
    medium = _capture(crf, radiance, t_mid, cfg.noise, noise_rng)
    truth = _capture(crf, radiance, t_mid, 0.0, noise_rng)
    return SynthScene(dark, truth, bright, radiance, crf, medium)


def write_synth(directory, scene: SynthScene) -> Path:
    """Write a stack, its manifest, ``truth.png`` and ``radiance.pfm``."""
    directory = Path(directory)
    manifest = save_stack(directory, scene.stack)
    write_image(directory / "truth.png", scene.truth.data)
    write_pfm(directory / "radiance.pfm", scene.radiance)
    return manifest


def split_dataset(stacks: Sequence, train_fraction: float, seed: int = 0):
    """Deterministic shuffled split into disjoint (train, test) lists."""
    if len(stacks) == 0:
        raise StackError("cannot split an empty dataset")
    if not 0 < train_fraction < 1:
        raise StackError("train fraction must lie strictly between 0 and 1")
    order = np.random.default_rng(seed).permutation(len(stacks))
    n_train = int(round(len(stacks) * train_fraction))
    train = [stacks[i] for i in order[:n_train]]
    test = [stacks[i] for i in order[n_train:]]
    return train, test


def find_truth(directory) -> Optional[np.ndarray]:
    path = Path(directory) / "truth.png"
    if path.exists():
        try:
            return read_image(path)
        except ImageError:
            return None
    return None

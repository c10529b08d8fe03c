"""Intensity mapping functions (IMFs) between exposures.

An IMF maps the 8-bit codes of one exposure to the codes of another exposure
of the same scene.  Tables are stored per channel as 256 fractional values on
the [0, 255] scale and are always monotone non-decreasing.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.optimize import least_squares
from scipy.special import comb

from .imgcore import ExposureImage

CODES = np.arange(256, dtype=np.float64)

# pixels outside this window are treated as clipped when matching histograms
MATCH_LO, MATCH_HI = 5, 250

SIGMOID_STARTS = 48


class ImfError(ValueError):
    pass


# --- tables -----------------------------------------------------------------

@dataclass(frozen=True)
class ImfTable:
    """Per-channel 256-entry monotone lookup ``values[c, z]``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = np.tile(v, (3, 1))
        if v.shape != (3, 256):
            raise ImfError(f"IMF table must have shape (3, 256), got {v.shape}")
        if not np.isfinite(v).all():
            raise ImfError("IMF table contains non-finite values")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def identity(cls) -> "ImfTable":
        return cls(np.tile(CODES, (3, 1)))

    def is_monotone(self) -> bool:
        return bool(np.all(np.diff(self.values, axis=1) >= 0))

    def apply(self, codes: np.ndarray) -> np.ndarray:
        """Look up integer codes of an (H, W, 3) image."""
        codes = np.asarray(codes)
        if codes.dtype != np.uint8:
            codes = np.clip(codes, 0, 255).astype(np.intp)
        out = np.empty(codes.shape, dtype=np.float64)
        for c in range(3):
            out[..., c] = self.values[c][codes[..., c]]
        return out

    def evaluate(self, z, channel: int) -> np.ndarray:
        """Evaluate at fractional codes by linear interpolation between entries."""
        return np.interp(z, CODES, self.values[channel])

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write("imf-v1\n")
        for c in range(3):
            for z in range(256):
                buf.write(f"{c},{z},{float(self.values[c, z])!r}\n")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source) -> "ImfTable":
        text = Path(source).read_text() if not str(source).startswith("imf-v1") else source
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != "imf-v1":
            raise ImfError("missing imf-v1 header")
        rows = lines[1:]
        if rows and rows[0].startswith("channel"):
            rows = rows[1:]
        if len(rows) != 768:
            raise ImfError(f"expected 768 data rows, found {len(rows)}")
        values = np.full((3, 256), np.nan)
        for row in rows:
            c, z, v = row.split(",")
            values[int(c), int(z)] = float(v)
        if np.isnan(values).any():
            raise ImfError("IMF CSV does not cover every (channel, z) pair")
        return cls(values)


def _repair(values: np.ndarray) -> np.ndarray:
    """Running maximum then clamp; downstream code relies on monotone tables."""
    return np.clip(np.maximum.accumulate(values, axis=-1), 0.0, 255.0)


def _check_monotone(imf: ImfTable):
    if not imf.is_monotone():
        raise ImfError("IMF table is not monotone non-decreasing")


# --- camera response --------------------------------------------------------

@dataclass(frozen=True)
class CrfModel:
    """Sampled per-channel camera response: ``codes[c]`` at ``irradiance``.

    Irradiance is normalized so that the sensor saturates at 1.0.
    """

    irradiance: np.ndarray
    codes: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.irradiance, dtype=np.float64)
        z = np.asarray(self.codes, dtype=np.float64)
        if z.ndim == 1:
            z = np.tile(z, (3, 1))
        if e.ndim != 1 or z.shape != (3, e.size) or e.size < 2:
            raise ImfError("CRF samples must be (n,) irradiance and (3, n) codes")
        if np.any(np.diff(e) <= 0) or np.any(np.diff(z, axis=1) <= 0):
            raise ImfError("CRF samples must be strictly increasing")
        if e[0] != 0 or np.any(z[:, 0] != 0) or np.any(np.abs(z[:, -1] - 255) > 1e-9):
            raise ImfError("CRF must satisfy F(0) = 0 and F(max) = 255")
        object.__setattr__(self, "irradiance", e)
        object.__setattr__(self, "codes", z)

    @classmethod
    def gamma(cls, gamma: float = 2.2, samples: int = 1024) -> "CrfModel":
        """F(e) = 255 e^(1/gamma), sampled uniformly in code space."""
        if gamma <= 0:
            raise ImfError("gamma must be positive")
        t = np.linspace(0.0, 1.0, samples)
        # code-uniform sampling keeps interpolation error small near black
        return cls(t ** gamma, 255.0 * t)

    def forward(self, e, channel: int) -> np.ndarray:
        return np.interp(e, self.irradiance, self.codes[channel])

    def inverse(self, z, channel: int) -> np.ndarray:
        return np.interp(z, self.codes[channel], self.irradiance)

    def expose(self, exposure: np.ndarray) -> np.ndarray:
        """Map an (H, W, 3) array of irradiance x time to float codes."""
        out = np.empty_like(exposure, dtype=np.float64)
        for c in range(3):
            out[..., c] = self.forward(np.clip(exposure[..., c], 0.0, self.irradiance[-1]), c)
        return out


def parse_crf(spec: str) -> CrfModel:
    """Parse a CLI CRF description such as ``gamma:2.2``."""
    kind, _, arg = spec.partition(":")
    if kind != "gamma":
        raise ImfError(f"unknown CRF kind {kind!r} (supported: gamma:<exponent>)")
    return CrfModel.gamma(float(arg) if arg else 2.2)


def _imf_from_functions(forward: Callable, inverse: Callable, ratio: float) -> ImfTable:
    values = np.empty((3, 256))
    for c in range(3):
        values[c] = forward(ratio * inverse(CODES, c), c)
    return ImfTable(_repair(values))


def imf_from_crf(crf: CrfModel, ratio: float) -> ImfTable:
    """Lambda(z) = F(ratio * F^-1(z)) with F evaluated by linear interpolation."""
    if not ratio > 0:
        raise ImfError(f"exposure ratio must be positive, got {ratio}")

    def forward(e, c):
        return crf.forward(np.clip(e, 0.0, crf.irradiance[-1]), c)

    return _imf_from_functions(forward, crf.inverse, ratio)


# --- pair-based estimation --------------------------------------------------

def _match_channel(src: np.ndarray, dst: np.ndarray):
    """Cumulative-histogram matching of src codes onto dst codes.

    Each integer code is treated as uniform mass over [z - 0.5, z + 0.5]; the
    centre of mass of every occupied source code is sent through the
    piecewise-linear inverse CDF of the destination.
    """
    hs = np.bincount(src, minlength=256).astype(np.float64)
    hd = np.bincount(dst, minlength=256).astype(np.float64)
    cs = np.cumsum(hs) / hs.sum()
    occupied = np.nonzero(hs)[0]
    q = cs[occupied] - 0.5 * hs[occupied] / hs.sum()
    # destination CDF knots: each occupied code spans [k - 0.5, k + 0.5]
    filled = np.nonzero(hd)[0]
    after = np.cumsum(hd)[filled] / hd.sum()
    before = after - hd[filled] / hd.sum()
    xp = np.stack([before, after], axis=1).ravel()
    fp = np.stack([filled - 0.5, filled + 0.5], axis=1).ravel()
    mapped = np.interp(q, xp, fp)
    return occupied.astype(np.float64), mapped


def _extend(zs: np.ndarray, vs: np.ndarray) -> np.ndarray:
    """Fill a full 256-entry table from sparse monotone (z, v) points."""
    if zs.size == 1:
        slope = vs[0] / zs[0] if zs[0] > 0 else 1.0
    else:
        slope = (vs[-1] - vs[0]) / (zs[-1] - zs[0])
    # anchor the dark end at the origin, extend the bright end with the mean slope
    lo_z, lo_v = (np.concatenate([[0.0], zs]), np.concatenate([[0.0], vs])) if zs[0] > 0 else (zs, vs)
    out = np.interp(CODES, lo_z, lo_v)
    above = CODES > zs[-1]
    out[above] = vs[-1] + slope * (CODES[above] - zs[-1])
    return out


def estimate_pair_imf(dark: ExposureImage, bright: ExposureImage) -> ImfTable:
    """Estimate the dark-to-bright IMF by cumulative-histogram matching.

    Only pixels whose codes lie in [5, 250] in *both* exposures take part, so
    clipped regions do not distort the histograms.
    """
    if dark.shape != bright.shape:
        raise ImfError(f"image sizes differ: {dark.shape} vs {bright.shape}")
    if bright.exposure_time < dark.exposure_time:
        raise ImfError("bright exposure time is shorter than the dark exposure time")
    values = np.empty((3, 256))
    for c in range(3):
        d = dark.data[..., c].ravel()
        b = bright.data[..., c].ravel()
        for name, ch in (("dark", d), ("bright", b)):
            if np.all(ch == 0) or np.all(ch == 255):
                raise ImfError(f"{name} image channel {c} is entirely saturated")
        mask = (d >= MATCH_LO) & (d <= MATCH_HI) & (b >= MATCH_LO) & (b <= MATCH_HI)
        if not mask.any():
            raise ImfError(f"channel {c}: no pixels are well exposed in both images")
        zs, vs = _match_channel(d[mask], b[mask])
        values[c] = _extend(zs, np.maximum.accumulate(vs))
    return ImfTable(_repair(values))


def _inverse_eval(table: np.ndarray, v) -> np.ndarray:
    """Monotone pseudo-inverse of a 256-entry table at arbitrary values.

    Returns the midpoint of the (continuous, piecewise-linear) preimage of
    ``v``; values below/above the table's range map to 0/255.  Preimage ends
    are located by bisection (searchsorted) on the table.
    """
    v = np.asarray(v, dtype=np.float64)
    n = table.size

    def crossing(idx):
        k = np.clip(idx, 1, n - 1)
        span = table[k] - table[k - 1]
        frac = np.divide(v - table[k - 1], span, out=np.zeros_like(v), where=span > 0)
        return (k - 1) + frac

    i = np.searchsorted(table, v, side="left")
    j = np.searchsorted(table, v, side="right")
    lo = np.where(i == 0, 0.0, crossing(i))
    hi = np.where(j >= n, n - 1.0, crossing(j))
    out = 0.5 * (lo + hi)
    out = np.where(j == 0, 0.0, out)
    out = np.where(i >= n, n - 1.0, out)
    return out


def invert(imf: ImfTable) -> ImfTable:
    """Monotone pseudo-inverse; plateaus invert to their midpoint."""
    _check_monotone(imf)
    values = np.stack([_inverse_eval(imf.values[c], CODES) for c in range(3)])
    return ImfTable(_repair(values))


def compose(outer: ImfTable, inner: ImfTable) -> ImfTable:
    """Table of ``outer(inner(z))`` using interpolation for fractional codes."""
    values = np.stack([outer.evaluate(inner.values[c], c) for c in range(3)])
    return ImfTable(_repair(values))


_SQRT_DEGREE = 5


def _bernstein(t: np.ndarray, degree: int = _SQRT_DEGREE) -> np.ndarray:
    return np.stack([comb(degree, k) * t ** k * (1 - t) ** (degree - k)
                     for k in range(degree + 1)], axis=1)


def _sqrt_candidate(lam: np.ndarray, coef: np.ndarray, knee: int, basis: np.ndarray):
    """Geometric-mean start times a smooth correction up to ``knee``.

    Above the knee (where ``lam`` saturates) g is filled from g = lam o g^-1,
    which holds exactly for any square root.
    """
    low = _repair(np.sqrt(CODES * lam) * np.exp(basis @ coef))
    if knee >= 255:
        return low
    # continue g past the knee with its local slope so g^-1 stays well defined there
    slope = max(low[knee] - low[knee - 1], 1e-6) if knee > 0 else 1.0
    head = np.concatenate([low[:knee + 1], low[knee] + slope * (CODES[knee + 1:] - knee)])
    g = low.copy()
    g[knee + 1:] = np.interp(_inverse_eval(head, CODES[knee + 1:]), CODES, lam)
    return _repair(g)


def functional_sqrt(imf: ImfTable, saturation: float = 250.0) -> ImfTable:
    """Monotone g with g(g(z)) ~= imf(z) on the unclipped range.

    g starts from the geometric mean sqrt(z * imf(z)) (exact for power-law
    tables) and a low-order multiplicative correction is fitted by least
    squares on the composition residual g(g(z)) - imf(z) over codes with
    imf(z) < ``saturation``.  The smooth correction keeps estimation noise
    in ``imf`` from being amplified along the g o g chain.
    """
    _check_monotone(imf)
    values = np.empty((3, 256))
    for c in range(3):
        lam = imf.values[c]
        unclipped = lam < saturation
        if not unclipped.any():
            values[c] = _repair(np.sqrt(CODES * lam))
            continue
        knee = int(np.nonzero(unclipped)[0].max())
        basis = _bernstein(np.clip(CODES / max(knee, 1), 0.0, 1.0))

        def residual(coef):
            g = _sqrt_candidate(lam, coef, knee, basis)
            return np.interp(g, CODES, g)[unclipped] - lam[unclipped]

        fit = least_squares(residual, np.zeros(basis.shape[1]), x_scale=0.1)
        values[c] = _sqrt_candidate(lam, fit.x, knee, basis)
    return ImfTable(values)


def medium_imfs(dark_to_bright: ImfTable):
    """Split a dark-to-bright IMF into (dark->medium, bright->medium) tables.

    With the medium exposure at the geometric mean of the pair, dark->medium
    and medium->bright are the same map, so dark->medium is the functional
    square root and bright->medium = dark->medium o (dark->bright)^-1.
    """
    dark_to_mid = functional_sqrt(dark_to_bright)
    bright_to_mid = compose(dark_to_mid, invert(dark_to_bright))
    return dark_to_mid, bright_to_mid


def medium_imfs_from_crf(crf: CrfModel, dark_time: float, bright_time: float):
    mid_time = np.sqrt(dark_time * bright_time)
    return imf_from_crf(crf, mid_time / dark_time), imf_from_crf(crf, mid_time / bright_time)


# --- scatter-plot curve estimation ------------------------------------------

@dataclass(frozen=True)
class ScatterPlot:
    """Per-channel known (irradiance proxy, code) points of F_c."""

    x: List[np.ndarray]
    z: List[np.ndarray]

    def __post_init__(self):
        xs, zs = [], []
        for xc, zc in zip(self.x, self.z):
            xc = np.asarray(xc, dtype=np.float64)
            zc = np.asarray(zc, dtype=np.float64)
            if xc.shape != zc.shape or xc.ndim != 1 or xc.size < 2:
                raise ImfError("each channel needs at least 2 (x, z) points")
            order = np.argsort(xc, kind="stable")
            xs.append(xc[order])
            zs.append(zc[order])
        if len(xs) != 3:
            raise ImfError("scatter plot needs 3 channels")
        object.__setattr__(self, "x", xs)
        object.__setattr__(self, "z", zs)

    def channel(self, c: int):
        return self.x[c], self.z[c]


def _merge_ties(x: np.ndarray, z: np.ndarray):
    ux, inv = np.unique(x, return_inverse=True)
    if ux.size == x.size:
        return x, z
    sums = np.bincount(inv, weights=z)
    counts = np.bincount(inv)
    return ux, sums / counts


def eval_linear(points: ScatterPlot, x, channel: int = 0) -> np.ndarray:
    """Piecewise-linear F through the known points, clamped outside their range."""
    px, pz = _merge_ties(*points.channel(channel))
    return np.interp(x, px, pz)


def scatter_from_exposures(images: Sequence[ExposureImage], radiance: np.ndarray) -> ScatterPlot:
    """Build the F_c scatter plot from exposures of a known radiance map.

    For every unclipped code (1..254) the point is the mean exposure
    (radiance x time) of the pixels showing that code; (0, 0) is added as
    the black anchor.
    """
    xs, zs = [], []
    for c in range(3):
        sums = np.zeros(256)
        counts = np.zeros(256)
        for img in images:
            codes = img.data[..., c].ravel()
            exposure = img.exposure_time * radiance[..., c].ravel()
            sums += np.bincount(codes, weights=exposure, minlength=256)
            counts += np.bincount(codes, minlength=256)
        used = np.nonzero(counts[1:255])[0] + 1
        xs.append(np.concatenate([[0.0], sums[used] / counts[used]]))
        zs.append(np.concatenate([[0.0], used.astype(np.float64)]))
    return ScatterPlot(xs, zs)


@dataclass(frozen=True)
class DoubleSigmoidParams:
    """z = k1/(1+exp(k2+k3 x)) + k4/(1+exp(k5+k6 x)) and its fit residual."""

    k: np.ndarray
    rms: float = 0.0

    def __call__(self, x) -> np.ndarray:
        return _double_sigmoid(self.k, np.asarray(x, dtype=np.float64))


def _double_sigmoid(k, x):
    a = np.clip(k[1] + k[2] * x, -500, 500)
    b = np.clip(k[4] + k[5] * x, -500, 500)
    return k[0] / (1 + np.exp(a)) + k[3] / (1 + np.exp(b))


def _sigmoid_basis(q, t):
    a = np.clip(q[0] + q[1] * t, -500, 500)
    b = np.clip(q[2] + q[3] * t, -500, 500)
    return np.stack([1 / (1 + np.exp(a)), 1 / (1 + np.exp(b))], axis=1)


def _projected_residual(q, t, z):
    # the two amplitudes are linear given (k2, k3, k5, k6); solve them exactly
    basis = _sigmoid_basis(q, t)
    amp = np.linalg.lstsq(basis, z, rcond=None)[0]
    return basis @ amp - z


def _fit_channel(x, z, seed, starts):
    if np.ptp(z) == 0:
        # flat scatter: the first sigmoid at k2 = k3 = 0 evaluates to k1 / 2
        return DoubleSigmoidParams(np.array([2 * z[0], 0, 0, 0, 0, 0], dtype=np.float64), 0.0)
    x0, xr = x.min(), np.ptp(x) or 1.0
    t = (x - x0) / xr
    rng = np.random.default_rng(seed)
    best = None
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(starts):
            slopes = rng.choice([-1.0, 1.0], 2) * np.exp(rng.uniform(0.0, 6.0, 2))
            centres = rng.uniform(0.0, 1.2, 2)
            q0 = np.array([-slopes[0] * centres[0], slopes[0], -slopes[1] * centres[1], slopes[1]])
            fit = least_squares(_projected_residual, q0, args=(t, z), method="trf",
                                x_scale="jac", max_nfev=2000)
            cost = float(fit.fun @ fit.fun)
            if np.isfinite(cost) and (best is None or cost < best[1]):
                best = (fit.x, cost)
    if best is None:
        raise ImfError("double-sigmoid fit diverged for every start")
    q, cost = best
    amp = np.linalg.lstsq(_sigmoid_basis(q, t), z, rcond=None)[0]
    # undo the [0, 1] normalization of x
    k = np.array([amp[0], q[0] - q[1] * x0 / xr, q[1] / xr,
                  amp[1], q[2] - q[3] * x0 / xr, q[3] / xr])
    return DoubleSigmoidParams(k, float(np.sqrt(cost / z.size)))


def fit_double_sigmoid(points: ScatterPlot, seed: int = 0,
                       starts: int = SIGMOID_STARTS) -> List[DoubleSigmoidParams]:
    """Least-squares double-sigmoid fit per channel.

    The objective has many poor local minima, so every channel is fitted
    from ``starts`` random initializations with the amplitudes projected out.
    """
    out = []
    for c in range(3):
        x, z = points.channel(c)
        if x.size < 6:
            raise ImfError(f"channel {c}: need at least 6 points, got {x.size}")
        out.append(_fit_channel(x, z, seed + c, starts))
    return out


def _scatter_inverse(x: np.ndarray, z: np.ndarray):
    """Inverse of a monotone-repaired curve given by samples (x, z)."""
    z = np.maximum.accumulate(z)
    keep = np.concatenate([[True], np.diff(z) > 0])
    return lambda v: np.interp(v, z[keep], x[keep])


def imf_from_scatter(points: ScatterPlot, ratio: float, method: str = "linear",
                     seed: int = 0,
                     params: Optional[Sequence[DoubleSigmoidParams]] = None) -> ImfTable:
    """IMF F(ratio * F^-1(z)) with F estimated from the scatter plot.

    ``method="linear"`` interpolates the known points piecewise linearly;
    ``method="sigmoid"`` fits the double-sigmoid curve instead, or uses
    ``params`` when an earlier fit of the same points is supplied.
    """
    if method == "linear":
        merged = [_merge_ties(*points.channel(c)) for c in range(3)]
        inverses = [_scatter_inverse(px, pz) for px, pz in merged]

        def forward(e, c):
            return np.interp(e, *merged[c])
    elif method == "sigmoid":
        if params is None:
            params = fit_double_sigmoid(points, seed)
        grids = [np.linspace(points.x[c][0], points.x[c][-1], 8192) for c in range(3)]
        inverses = [_scatter_inverse(grids[c], params[c](grids[c])) for c in range(3)]
        hi = [points.x[c][-1] for c in range(3)]

        def forward(e, c):
            return params[c](np.clip(e, 0.0, hi[c]))
    else:
        raise ImfError(f"unknown curve method {method!r}")

    def inverse(z, c):
        return inverses[c](z)

    return _imf_from_functions(forward, inverse, ratio)

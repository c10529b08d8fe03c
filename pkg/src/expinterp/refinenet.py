"""Residual refinement network, direct-prediction baseline and their trainer.

The refinement net maps y0 (on [0, 1]) to a residual; the refined image is
``clamp(y0 + 255 * residual)``.  Its last convolution starts at zero, so an
untrained net leaves y0 untouched.  Losses are evaluated by
:mod:`expinterp.losses` (numpy, analytic gradients) through a small autograd
bridge, so the trainer and the loss tests exercise the same code.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .losses import (FeatureExtractor, LossBreakdown, LossWeights, PsiParams,
                     composite_loss_grad)
from .metrics import psnr

logger = logging.getLogger(__name__)

MAGIC = b"RFN1"
FORMAT_VERSION = 1
SA_KERNEL = 5
TILE = 128
TILE_OVERLAP = 16


class NetError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    rrg_count: int = 2
    dabs_per_rrg: int = 2
    feature_channels: int = 16
    kernel_size: int = 3
    ca_reduction: int = 4
    seed: int = 0
    learning_rate: float = 1e-4
    epochs: int = 50
    patch_size: int = 64
    batch_size: int = 8
    steps_per_epoch: int = 8

    def __post_init__(self):
        for name in ("rrg_count", "dabs_per_rrg", "feature_channels", "kernel_size",
                     "ca_reduction", "epochs", "patch_size", "batch_size", "steps_per_epoch"):
            if getattr(self, name) < 1:
                raise NetError(f"{name} must be >= 1")
        if self.feature_channels % self.ca_reduction:
            raise NetError("feature_channels must be divisible by ca_reduction")
        if self.kernel_size % 2 == 0:
            raise NetError("kernel_size must be odd")


def _conv(c_in, c_out, k):
    return nn.Conv2d(c_in, c_out, k, padding=k // 2, padding_mode="reflect")


class ChannelAttention(nn.Module):
    """Global average pool -> bottleneck -> per-channel sigmoid gate."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        self.squeeze = nn.Conv2d(channels, channels // reduction, 1)
        self.excite = nn.Conv2d(channels // reduction, channels, 1)

    def forward(self, x):
        pooled = x.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.excite(torch.relu(self.squeeze(pooled))))


class SpatialAttention(nn.Module):
    """Channel max + mean -> conv -> per-position sigmoid gate."""

    def __init__(self, kernel_size: int = SA_KERNEL):
        super().__init__()
        self.conv = _conv(2, 1, kernel_size)

    def forward(self, x):
        pooled = torch.cat([x.amax(dim=1, keepdim=True), x.mean(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))


class DualAttentionBlock(nn.Module):
    def __init__(self, channels: int, kernel_size: int, reduction: int):
        super().__init__()
        self.body = nn.Sequential(_conv(channels, channels, kernel_size), nn.ReLU(),
                                  _conv(channels, channels, kernel_size))
        self.ca = ChannelAttention(channels, reduction)
        self.sa = SpatialAttention()

    def forward(self, x):
        t = self.body(x)
        return x + 0.5 * (t * self.ca(t) + t * self.sa(t))


class ResidualGroup(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        f = cfg.feature_channels
        self.blocks = nn.Sequential(*[DualAttentionBlock(f, cfg.kernel_size, cfg.ca_reduction)
                                      for _ in range(cfg.dabs_per_rrg)])
        self.tail = _conv(f, f, cfg.kernel_size)

    def forward(self, x):
        return x + self.tail(self.blocks(x))


class RefineNet(nn.Module):
    """y0 -> residual; conv_out is zero-initialized."""

    kind = "refine"
    in_channels = 3

    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        f, k = cfg.feature_channels, cfg.kernel_size
        self.head = self._make_head(f, k)
        self.groups = nn.Sequential(*[ResidualGroup(cfg) for _ in range(cfg.rrg_count)])
        self.conv_out = _conv(f, 3, k)
        self._init_output()

    def _make_head(self, f, k):
        return _conv(3, f, k)

    def _init_output(self):
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def _embed(self, x):
        return self.head(x)

    def receptive_radius(self) -> int:
        """Pixels of spatial context one output pixel depends on, ignoring global pooling."""
        cfg = self.cfg
        r = cfg.kernel_size // 2
        per_dab = 2 * r + SA_KERNEL // 2
        per_group = cfg.dabs_per_rrg * per_dab + r
        return self._head_radius() + cfg.rrg_count * per_group + r

    def _head_radius(self):
        return self.cfg.kernel_size // 2

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise NetError(f"expected (N, {self.in_channels}, H, W) input, got {tuple(x.shape)}")
        return self.conv_out(self.groups(self._embed(x)))


class DirectNet(RefineNet):
    """(dark, bright) -> medium image, two input branches then the same trunk."""

    kind = "direct"
    in_channels = 6

    def _make_head(self, f, k):
        half = f // 2
        return nn.ModuleList([
            nn.Sequential(_conv(3, half, k), nn.ReLU(), _conv(half, half, k)),
            nn.Sequential(_conv(3, f - half, k), nn.ReLU(), _conv(f - half, f - half, k)),
        ])

    def _init_output(self):
        pass

    def _head_radius(self):
        return 2 * (self.cfg.kernel_size // 2)

    def _embed(self, x):
        return torch.cat([self.head[0](x[:, :3]), self.head[1](x[:, 3:])], dim=1)


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def forward(net: RefineNet, patch) -> torch.Tensor:
    """Residual for a (N, 3, H, W) batch on the [0, 1] scale."""
    x = torch.as_tensor(patch, dtype=next(net.parameters()).dtype)
    with torch.no_grad():
        return net(x)


# --- loss bridge --------------------------------------------------------------

@dataclass
class LossSpec:
    psi: PsiParams = field(default_factory=PsiParams)
    weights: LossWeights = field(default_factory=LossWeights)
    recon: str = "hybrid"
    extractor: Optional[FeatureExtractor] = None

    def unit_scale(self) -> "LossSpec":
        """Same loss for images on [0, 1] (psi threshold divided by 255)."""
        return replace(self, psi=self.psi.rescaled(1.0 / 255.0))


def _nhwc(t: torch.Tensor) -> np.ndarray:
    return t.detach().permute(0, 2, 3, 1).cpu().numpy().astype(np.float64)


def loss_and_grad(residual: torch.Tensor, y: torch.Tensor, base: torch.Tensor,
                  spec: LossSpec) -> Tuple[torch.Tensor, LossBreakdown]:
    """Composite loss of ``base + residual`` against ``y`` (NCHW tensors).

    Returns a surrogate scalar whose gradient w.r.t. ``residual`` equals the
    composite-loss gradient, plus the loss breakdown.  The surrogate's value
    is not the loss; read ``breakdown.total`` for that.
    """
    fx = spec.extractor if spec.weights.w_f else None
    breakdown, grad = composite_loss_grad(_nhwc(y), _nhwc(base), _nhwc(residual),
                                          spec.psi, spec.weights, fx, spec.recon)
    g = torch.from_numpy(grad).permute(0, 3, 1, 2).to(residual.dtype)
    return (residual * g).sum(), breakdown


def backward(net: RefineNet, inputs, y, spec: LossSpec,
             base=None) -> Tuple[Dict[str, torch.Tensor], LossBreakdown]:
    """Parameter gradients of the composite loss for one batch.

    ``inputs`` is what the net sees (y0 for the refinement net); ``base`` is
    what the output is added to and defaults to ``inputs``.  All tensors are
    NCHW on the [0, 1] scale and ``spec`` must already be on that scale.
    """
    dtype = next(net.parameters()).dtype
    inputs = torch.as_tensor(inputs, dtype=dtype)
    y = torch.as_tensor(y, dtype=dtype)
    base = inputs if base is None else torch.as_tensor(base, dtype=dtype)
    if y.shape != base.shape:
        raise NetError(f"target {tuple(y.shape)} and base {tuple(base.shape)} differ")
    net.zero_grad()
    surrogate, breakdown = loss_and_grad(net(inputs), y, base, spec)
    surrogate.backward()
    return {name: p.grad.detach().clone() for name, p in net.named_parameters()}, breakdown


# --- training -----------------------------------------------------------------

def _chw(img) -> torch.Tensor:
    return torch.from_numpy(np.asarray(img, dtype=np.float32) / 255.0).permute(2, 0, 1)


@dataclass
class _Sample:
    inputs: torch.Tensor  # (C, H, W)
    base: torch.Tensor  # (3, H, W)
    target: torch.Tensor  # (3, H, W)


def _batch(samples: List[_Sample], cfg: NetConfig, rng: np.random.Generator):
    picks = rng.integers(len(samples), size=cfg.batch_size)
    parts = ([], [], [])
    for i in picks:
        s = samples[i]
        h, w = s.target.shape[1:]
        ph, pw = min(cfg.patch_size, h), min(cfg.patch_size, w)
        top = int(rng.integers(h - ph + 1))
        left = int(rng.integers(w - pw + 1))
        flip_h, flip_v = rng.integers(2, size=2)
        for acc, t in zip(parts, (s.inputs, s.base, s.target)):
            crop = t[:, top:top + ph, left:left + pw]
            if flip_h:
                crop = crop.flip(2)
            if flip_v:
                crop = crop.flip(1)
            acc.append(crop)
    return tuple(torch.stack(p) for p in parts)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    l_r: float
    l_c: float
    l_f: float
    psnr: float


HISTORY_COLUMNS = ("epoch", "loss", "l_r", "l_c", "l_f", "psnr")


@dataclass
class TrainResult:
    net: RefineNet
    history: List[EpochRecord]
    seconds: float

    def epochs_to(self, threshold: float) -> Optional[int]:
        """First epoch (1-based) whose mean training loss is <= threshold."""
        for rec in self.history:
            if rec.loss <= threshold:
                return rec.epoch
        return None

    def write_history(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(HISTORY_COLUMNS) + "\n")
            for r in self.history:
                fh.write(f"{r.epoch},{r.loss:.8g},{r.l_r:.8g},{r.l_c:.8g},{r.l_f:.8g},{r.psnr:.4f}\n")


def _fit(net: RefineNet, samples: List[_Sample], cfg: NetConfig, spec: LossSpec,
         predict) -> TrainResult:
    if not samples:
        raise NetError("no training samples")
    spec = spec.unit_scale()
    if spec.weights.w_f and spec.extractor is None:
        spec = replace(spec, extractor=FeatureExtractor.random())
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    history = []
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        net.train()
        sums = np.zeros(4)
        for _ in range(cfg.steps_per_epoch):
            inputs, base, target = _batch(samples, cfg, rng)
            opt.zero_grad()
            surrogate, br = loss_and_grad(net(inputs), target, base, spec)
            surrogate.backward()
            opt.step()
            sums += (br.total, br.l_r, br.l_c, br.l_f)
        net.eval()
        scores = [psnr(predict(net, s), 255.0 * s.target.permute(1, 2, 0).numpy())
                  for s in samples]
        means = sums / cfg.steps_per_epoch
        rec = EpochRecord(epoch, *map(float, means), float(np.mean(scores)))
        history.append(rec)
        logger.info("epoch %d loss %.6f psnr %.3f", epoch, rec.loss, rec.psnr)
    return TrainResult(net, history, time.perf_counter() - start)


def _refine_sample(y0, y) -> _Sample:
    y0 = np.asarray(y0, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y0.shape != y.shape or y0.ndim != 3 or y0.shape[2] != 3:
        raise NetError(f"y0 {y0.shape} and target {y.shape} must be matching (H, W, 3)")
    t = _chw(y0)
    return _Sample(t, t, _chw(y))


def train(pairs: Sequence[Tuple[np.ndarray, np.ndarray]], cfg: NetConfig = NetConfig(),
          spec: Optional[LossSpec] = None) -> TrainResult:
    """Train the residual net on (y0, target) pairs given on the [0, 255] scale."""
    samples = [_refine_sample(y0, y) for y0, y in pairs]
    net = RefineNet(cfg)
    return _fit(net, samples, cfg, spec or LossSpec(),
                lambda n, s: _refine_chw(n, s.inputs))


def train_direct_baseline(triples: Sequence[Tuple[np.ndarray, np.ndarray, np.ndarray]],
                          cfg: NetConfig = NetConfig(),
                          spec: Optional[LossSpec] = None) -> TrainResult:
    """Train :class:`DirectNet` on (dark, bright, target) triples."""
    samples = []
    for dark, bright, y in triples:
        d, b, t = (_chw(a) for a in (dark, bright, y))
        if not d.shape == b.shape == t.shape:
            raise NetError("dark, bright and target must share one shape")
        samples.append(_Sample(torch.cat([d, b]), torch.zeros_like(t), t))
    net = DirectNet(cfg)
    return _fit(net, samples, cfg, spec or LossSpec(),
                lambda n, s: _tiled(n, s.inputs))


# --- inference ----------------------------------------------------------------

def _tile_starts(n: int, tile: int, step: int) -> List[int]:
    if n <= tile:
        return [0]
    starts = list(range(0, n - tile, step))
    return starts + [n - tile]


def _ramp(n: int, start: int, stop: int, overlap: int, full: int) -> np.ndarray:
    """Feathering weights of one tile along one axis."""
    w = np.ones(n, dtype=np.float32)
    ov = min(overlap, n // 2)
    if ov and start > 0:
        w[:ov] = (np.arange(ov) + 1) / (ov + 1)
    if ov and stop < full:
        w[n - ov:] = ((np.arange(ov) + 1) / (ov + 1))[::-1]
    return w


def _tiled(net: RefineNet, x: torch.Tensor, tile: int = TILE,
           overlap: int = TILE_OVERLAP) -> np.ndarray:
    """Net output for a (C, H, W) input as (H, W, 3), tiled with linear feathering.

    Each tile is evaluated with a halo of real neighbouring pixels as wide as
    the net's receptive radius, so tile borders do not see padding.
    """
    _, h, w = x.shape
    step = max(1, tile - overlap)
    halo = net.receptive_radius()
    out = np.zeros((h, w, 3), dtype=np.float64)
    acc = np.zeros((h, w, 1), dtype=np.float64)
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        for top in _tile_starts(h, tile, step):
            for left in _tile_starts(w, tile, step):
                bottom, right = min(top + tile, h), min(left + tile, w)
                t0, l0 = max(top - halo, 0), max(left - halo, 0)
                b0, r0 = min(bottom + halo, h), min(right + halo, w)
                patch = x[None, :, t0:b0, l0:r0].to(dtype)
                pred = net(patch)[0].permute(1, 2, 0).double().numpy()
                pred = pred[top - t0:bottom - t0, left - l0:right - l0]
                wy = _ramp(bottom - top, top, bottom, overlap, h)
                wx = _ramp(right - left, left, right, overlap, w)
                wt = (wy[:, None] * wx[None, :])[..., None]
                out[top:bottom, left:right] += wt * pred
                acc[top:bottom, left:right] += wt
    return 255.0 * out / acc


def _refine_chw(net: RefineNet, y0: torch.Tensor) -> np.ndarray:
    base = 255.0 * y0.permute(1, 2, 0).double().numpy()
    return np.clip(base + _tiled(net, y0), 0.0, 255.0)


def apply_refinement(net: RefineNet, y0: np.ndarray) -> np.ndarray:
    """Refined image ``clamp(y0 + 255 * net(y0 / 255))`` on the [0, 255] scale."""
    y0 = np.asarray(y0, dtype=np.float64)
    if y0.ndim != 3 or y0.shape[2] != 3:
        raise NetError(f"y0 must be (H, W, 3), got {y0.shape}")
    net.eval()
    return _refine_chw(net, _chw(y0))


def predict_direct(net: DirectNet, dark: np.ndarray, bright: np.ndarray) -> np.ndarray:
    net.eval()
    x = torch.cat([_chw(dark), _chw(bright)])
    return np.clip(_tiled(net, x), 0.0, 255.0)


# --- serialization ------------------------------------------------------------

_NETS = {RefineNet.kind: RefineNet, DirectNet.kind: DirectNet}


def save_model(net: RefineNet, path) -> None:
    """Binary model file: magic, version, JSON config, then float32 tensors."""
    header = json.dumps({"kind": net.kind, "config": asdict(net.cfg)}, sort_keys=True).encode()
    state = net.state_dict()
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header,
              struct.pack("<I", len(state))]
    for tensor in state.values():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_model(path) -> RefineNet:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise NetError(f"{path}: not a model file")
    try:
        version, hlen = struct.unpack_from("<II", blob, 4)
        if version != FORMAT_VERSION:
            raise NetError(f"{path}: unsupported model version {version}")
        pos = 12
        meta = json.loads(blob[pos:pos + hlen])
        pos += hlen
        net = _NETS[meta["kind"]](NetConfig(**meta["config"]))
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        state = net.state_dict()
        if count != len(state):
            raise NetError(f"{path}: expected {len(state)} tensors, found {count}")
        loaded = {}
        for name, ref in state.items():
            (ndim,) = struct.unpack_from("<I", blob, pos)
            shape = struct.unpack_from(f"<{ndim}I", blob, pos + 4)
            pos += 4 + 4 * ndim
            if tuple(shape) != tuple(ref.shape):
                raise NetError(f"{path}: tensor {name} has shape {shape}, expected {tuple(ref.shape)}")
            n = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape)
            pos += 4 * n
            loaded[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, NetError):
            raise
        raise NetError(f"{path}: corrupt model file ({exc})") from exc
    if pos != len(blob):
        raise NetError(f"{path}: trailing bytes in model file")
    net.load_state_dict(loaded)
    net.eval()
    return net

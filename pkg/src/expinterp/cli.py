"""Command-line front end: ``expinterp <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 numeric failure.
Every subcommand writes a ``run.json`` with its full parameter set.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .dataio import (StackError, SynthConfig, find_truth, load_stack, synth_scene,
                     write_synth)
from .imf import ImfError, parse_crf
from .imgcore import (ImageError, load_exposure, quantize, read_image, read_pfm, write_image,
                      write_pfm)
from .interp import InterpError, WeightParams, interpolate_pair
from .losses import FeatureExtractor, LossError, LossWeights, PsiParams, composite_loss
from .mef import FusionError, MefParams, fuse_mef
from .metrics import MetricError, mef_ssim, psnr, ssim
from .refinenet import (LossSpec, NetConfig, NetError, apply_refinement, load_model, save_model,
                        train)

logger = logging.getLogger("expinterp")

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 1, 2, 3
PSI_UNIT = 5.0 / 255.0


class UsageError(Exception):
    pass


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults, except for unset optional flags."""

    def _get_help_string(self, action):
        if action.default is None or action.default is argparse.SUPPRESS:
            return action.help
        return super()._get_help_string(action)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- helpers ------------------------------------------------------------------

def _require_files(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(str(p))


def _read_any(path) -> np.ndarray:
    """Image as float64 on [0, 255]; PFM keeps full precision."""
    if Path(path).suffix.lower() == ".pfm":
        return read_pfm(path)
    return read_image(path).astype(np.float64)


def _write_any(path, img: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        write_pfm(path, img)
    else:
        write_image(path, quantize(img))


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _write_run(path, args: argparse.Namespace, extra: Optional[Dict] = None) -> None:
    record = {"subcommand": args.command, "version": __version__}
    record["args"] = {k: _jsonable(v) for k, v in sorted(vars(args).items())
                      if k not in ("func", "command", "log_level")}
    if extra:
        record.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _weights(args) -> WeightParams:
    try:
        return WeightParams(args.xi_l, args.xi_u)
    except InterpError as exc:
        raise UsageError(str(exc)) from exc


def _pair_from_args(args):
    """(dark, bright, truth or None) from --stack or --dark/--bright."""
    if args.stack is not None:
        _require_files(args.stack)
        stack = load_stack(args.stack)
        return stack.dark, stack.bright, find_truth(stack.directory)
    if args.dark is None or args.bright is None:
        raise UsageError("give either --stack or both --dark and --bright")
    _require_files(args.dark, args.bright)
    dark = load_exposure(args.dark, args.dark_time)
    bright = load_exposure(args.bright, args.bright_time)
    return dark, bright, None


def _loss_spec(args) -> LossSpec:
    try:
        return LossSpec(PsiParams(args.c * 255.0), LossWeights(args.w_c, args.w_f), args.recon)
    except LossError as exc:
        raise UsageError(str(exc)) from exc


# --- subcommands --------------------------------------------------------------

def cmd_interpolate(args) -> int:
    params = _weights(args)
    try:
        crf = parse_crf(args.crf) if args.crf else None
    except ValueError as exc:
        raise UsageError(f"bad --crf value {args.crf!r}: {exc}") from exc
    dark, bright, truth = _pair_from_args(args)
    if args.truth is not None:
        _require_files(args.truth)
        truth = read_image(args.truth)
    result = interpolate_pair(dark, bright, params, crf)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pfm(out.with_suffix(".pfm"), result.y0)
    write_image(out.with_suffix(".png"), quantize(result.y0))
    stem = out.with_suffix("")
    result.dark_to_mid.to_csv(f"{stem}_dark_to_mid.csv")
    result.bright_to_mid.to_csv(f"{stem}_bright_to_mid.csv")
    if result.dark_to_bright is not None:
        result.dark_to_bright.to_csv(f"{stem}_dark_to_bright.csv")
    extra = {}
    if truth is not None:
        score = psnr(result.y0, truth)
        extra["psnr_y0"] = round(score, 6)
        print(f"psnr(y0, truth) = {score:.3f} dB")
    _write_run(out.parent / "run.json", args, extra)
    logger.info("wrote %s", out.with_suffix(".pfm"))
    return 0


def _training_pairs(dirs: Sequence[Path], params: WeightParams):
    pairs = []
    for d in dirs:
        stack = load_stack(d)
        target = find_truth(stack.directory)
        if target is None:
            if stack.medium is None:
                raise StackError(f"{d}: needs truth.png or a medium exposure as training target")
            target = stack.medium.data
        y0 = interpolate_pair(stack.dark, stack.bright, params).y0
        pairs.append((y0, target))
    return pairs


def _net_config(args) -> NetConfig:
    try:
        return NetConfig(rrg_count=args.rrg, dabs_per_rrg=args.dab,
                         feature_channels=args.features, seed=args.seed,
                         learning_rate=args.lr, epochs=args.epochs, patch_size=args.patch,
                         batch_size=args.batch, steps_per_epoch=args.steps)
    except NetError as exc:
        raise UsageError(str(exc)) from exc


def cmd_refine_train(args) -> int:
    params = _weights(args)
    cfg = _net_config(args)
    spec = _loss_spec(args)
    _require_files(*args.data)
    pairs = _training_pairs(args.data, params)
    result = train(pairs, cfg, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(result.net, out / "model.rfn")
    result.write_history(out / "history.csv")
    final = result.history[-1]
    print(f"final loss {final.loss:.6f}, training psnr {final.psnr:.3f} dB")
    _write_run(out / "run.json", args, {"final_loss": final.loss, "final_psnr": final.psnr})
    return 0


def cmd_refine_apply(args) -> int:
    params = _weights(args)
    _require_files(args.model)
    net = load_model(args.model)
    truth = None
    if args.y0 is not None:
        _require_files(args.y0)
        y0 = _read_any(args.y0)
    elif args.stack is not None:
        _require_files(args.stack)
        stack = load_stack(args.stack)
        y0 = interpolate_pair(stack.dark, stack.bright, params).y0
        truth = find_truth(stack.directory)
    else:
        raise UsageError("give either --y0 or --stack")
    if args.truth is not None:
        _require_files(args.truth)
        truth = read_image(args.truth)
    refined = apply_refinement(net, y0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_any(out, refined)
    extra = {}
    if truth is not None:
        extra = {"psnr_y0": psnr(y0, truth), "psnr_refined": psnr(refined, truth)}
        print(f"psnr(y0, truth) = {extra['psnr_y0']:.3f} dB, "
              f"psnr(refined, truth) = {extra['psnr_refined']:.3f} dB")
    _write_run(out.parent / "run.json", args, extra)
    return 0


def cmd_fuse(args) -> int:
    try:
        p = MefParams(args.contrast, args.saturation, args.exposedness, args.sigma, args.levels)
    except FusionError as exc:
        raise UsageError(str(exc)) from exc
    _require_files(*args.inputs)
    images = [_read_any(path) for path in args.inputs]
    fused = fuse_mef(images, p)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_image(out, fused)
    _write_run(out.parent / "run.json", args)
    return 0


def evaluate_rows(fused: np.ndarray, refs: Sequence[np.ndarray],
                  truth: Optional[np.ndarray], spec: LossSpec) -> List[tuple]:
    """(metric, value) rows for the ``evaluate`` subcommand."""
    rows = []
    if truth is not None:
        rows += [("psnr", psnr(fused, truth)), ("ssim", ssim(fused, truth))]
    if len(refs) >= 2:
        rows.append(("mef_ssim", mef_ssim(fused, refs)))
    if truth is not None:
        # losses of the image against the target on the [0, 1] scale
        y = np.asarray(truth, dtype=np.float64)[None] / 255.0
        pred = np.asarray(fused, dtype=np.float64)[None] / 255.0
        unit = spec.unit_scale()
        br = composite_loss(y, np.zeros_like(y), pred, unit.psi, unit.weights,
                            FeatureExtractor.random(), unit.recon)
        rows += [("l_r", br.l_r), ("l_c", br.l_c), ("l_f", br.l_f), ("l_d", br.total)]
    return rows


def cmd_evaluate(args) -> int:
    spec = _loss_spec(args)
    _require_files(args.fused, args.truth, *(args.refs or []))
    fused = _read_any(args.fused)
    refs = [_read_any(p) for p in args.refs or []]
    truth = _read_any(args.truth) if args.truth is not None else None
    if len(refs) == 1:
        raise UsageError("--refs needs at least two exposures")
    if truth is None and not refs:
        raise UsageError("give --truth and/or --refs")
    rows = evaluate_rows(fused, refs, truth, spec)
    if args.out is not None:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        handle = open(out, "w", newline="")
        run_path = out.parent / "run.json"
    else:
        handle, run_path = sys.stdout, Path(args.run_json or "run.json")
    try:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for name, value in rows:
            writer.writerow([name, f"{value:.10g}"])
    finally:
        if handle is not sys.stdout:
            handle.close()
    _write_run(run_path, args, {"metrics": {k: v for k, v in rows}})
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    try:
        cfgs = [SynthConfig(seed=args.seed + i, width=args.width, height=args.height,
                            gamma=args.gamma, ratio=args.ratio, noise=args.noise)
                for i in range(args.count)]
    except StackError as exc:
        raise UsageError(str(exc)) from exc
    for i, cfg in enumerate(cfgs):
        target = out if args.count == 1 else out / f"scene_{i:03d}"
        write_synth(target, synth_scene(cfg))
        logger.info("wrote synthetic stack %s", target)
    _write_run(out / "run.json", args)
    return 0


# --- parser -------------------------------------------------------------------

def _add_weight_flags(p):
    p.add_argument("--xi-l", type=float, default=25.0,
                   help="lower cut of the short-exposure weight ramp, in codes")
    p.add_argument("--xi-u", type=float, default=230.0,
                   help="upper cut of the long-exposure weight ramp, in codes")


def _add_loss_flags(p):
    p.add_argument("--c", type=float, default=PSI_UNIT,
                   help="hybrid L1/L2 threshold on the [0, 1] scale, 5/255")
    p.add_argument("--w-c", type=float, default=0.01, help="colour loss weight")
    p.add_argument("--w-f", type=float, default=0.01, help="feature loss weight")
    p.add_argument("--recon", choices=("hybrid", "l1", "l2"), default="hybrid",
                   help="reconstruction term")


def _add_pair_flags(p):
    p.add_argument("--stack", type=Path, help="stack directory or exposures.csv manifest")
    p.add_argument("--dark", type=Path, help="short exposure image")
    p.add_argument("--bright", type=Path, help="long exposure image")
    p.add_argument("--dark-time", type=float, default=1.0,
                   help="exposure time of --dark")
    p.add_argument("--bright-time", type=float, default=16.0,
                   help="exposure time of --bright")


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = _Parser(prog="expinterp", description=__doc__.splitlines()[0],
                     formatter_class=fmt)
    parser.add_argument("--log-level", default="WARNING",
                        choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("interpolate", help="synthesize the medium exposure y0",
                       formatter_class=fmt)
    _add_pair_flags(p)
    p.add_argument("--out", type=Path, required=True, help="y0 output (.pfm; a .png is added)")
    p.add_argument("--crf", help="known response curve, e.g. gamma:2.2 (skips pair estimation)")
    p.add_argument("--truth", type=Path, help="reference medium image for a PSNR report")
    _add_weight_flags(p)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("refine-train", help="train the residual refinement net",
                       formatter_class=fmt)
    p.add_argument("--data", type=Path, nargs="+", required=True,
                   help="stack directories with truth.png (or a medium exposure)")
    p.add_argument("--out", type=Path, required=True,
                   help="output directory for model.rfn, history.csv, run.json")
    p.add_argument("--epochs", type=int, default=NetConfig.epochs, help="training epochs")
    p.add_argument("--steps", type=int, default=NetConfig.steps_per_epoch,
                   help="optimizer steps per epoch")
    p.add_argument("--batch", type=int, default=NetConfig.batch_size, help="crops per step")
    p.add_argument("--patch", type=int, default=NetConfig.patch_size, help="crop side in pixels")
    p.add_argument("--lr", type=float, default=NetConfig.learning_rate, help="Adam step size")
    p.add_argument("--features", type=int, default=NetConfig.feature_channels,
                   help="feature channels")
    p.add_argument("--rrg", type=int, default=NetConfig.rrg_count, help="residual groups")
    p.add_argument("--dab", type=int, default=NetConfig.dabs_per_rrg,
                   help="attention blocks per group")
    p.add_argument("--seed", type=int, default=0, help="RNG seed")
    _add_loss_flags(p)
    _add_weight_flags(p)
    p.set_defaults(func=cmd_refine_train)

    p = sub.add_parser("refine-apply", help="refine y0 with a trained model",
                       formatter_class=fmt)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--y0", type=Path, help="y0 image (.pfm or .png)")
    p.add_argument("--stack", type=Path, help="stack to interpolate first")
    p.add_argument("--out", type=Path, required=True, help="refined image (.pfm or .png)")
    p.add_argument("--truth", type=Path, help="reference image for a PSNR report")
    _add_weight_flags(p)
    p.set_defaults(func=cmd_refine_apply)

    p = sub.add_parser("fuse", help="multi-scale exposure fusion", formatter_class=fmt)
    p.add_argument("--inputs", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--contrast", type=float, default=1.0, help="contrast exponent")
    p.add_argument("--saturation", type=float, default=1.0, help="saturation exponent")
    p.add_argument("--exposedness", type=float, default=1.0,
                   help="well-exposedness exponent")
    p.add_argument("--sigma", type=float, default=0.2, help="well-exposedness spread")
    p.add_argument("--levels", type=int, default=None,
                   help="pyramid depth (default: floor(log2(min dim)) - 1)")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("evaluate", help="quality metrics as metric,value CSV",
                       formatter_class=fmt)
    p.add_argument("--fused", type=Path, required=True, help="image to score")
    p.add_argument("--refs", type=Path, nargs="+", help="source exposures for MEF-SSIM")
    p.add_argument("--truth", type=Path, help="reference for PSNR, SSIM and losses")
    p.add_argument("--out", type=Path, help="CSV path (default: stdout)")
    p.add_argument("--run-json", type=Path, help="run record path when writing to stdout")
    _add_loss_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="write a synthetic exposure stack", formatter_class=fmt)
    p.add_argument("--seed", type=int, default=0, help="RNG seed")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, default=1,
                   help="number of stacks; >1 writes scene_NNN subdirectories")
    p.add_argument("--width", type=int, default=SynthConfig.width, help="image width")
    p.add_argument("--height", type=int, default=SynthConfig.height, help="image height")
    p.add_argument("--gamma", type=float, default=SynthConfig.gamma,
                   help="exponent of the synthetic response curve")
    p.add_argument("--ratio", type=float, default=SynthConfig.ratio,
                   help="bright/dark exposure-time ratio")
    p.add_argument("--noise", type=float, default=SynthConfig.noise,
                   help="noise standard deviation in codes")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"expinterp {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"expinterp {args.command}: no such file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_IO
    except (OSError, ImageError, StackError) as exc:
        print(f"expinterp {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ImfError, InterpError, LossError, NetError, FusionError, MetricError,
            FloatingPointError) as exc:
        print(f"expinterp {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

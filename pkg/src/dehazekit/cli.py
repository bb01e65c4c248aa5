"""Command line interface.

Exit codes: 0 success, 1 usage, 2 IO, 3 validation.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .attribution import PathConfig, paam
from .bench import bench_cache, default_schedule, load_schedule, to_csv
from .config import ConfigError, ModelConfig
from .fileio import ImageFormatError, atomic_write, read_image, write_image
from .haze import HazeScene, synthesize_haze
from .metrics import psnr, ssim
from .model import DehazeModel
from .numerics import ShapeError
from .weights import WeightStoreError, init_weights, load_weights

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VALIDATION = 0, 1, 2, 3
MAX_ATTRIBUTION_PIXELS = 32 * 32


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_model(args) -> DehazeModel:
    cfg = ModelConfig.load(args.config) if args.config else ModelConfig()
    store = load_weights(args.weights, cfg) if args.weights else init_weights(cfg)
    return DehazeModel(cfg, store)


def _json_float(v: float):
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


def cmd_dehaze(args) -> int:
    model = _load_model(args)
    image = read_image(args.input)
    if image.shape[1] != 3:
        raise ValidationError("input must be an RGB (P6) image")
    trace: dict = {}
    j, _ = model.dehaze(image, trace=trace)
    out = np.clip(j, 0.0, 1.0)
    write_image(args.output, out)
    if args.debug_dumps:
        d = Path(args.debug_dumps)
        d.mkdir(parents=True, exist_ok=True)
        write_image(d / "dark.pgm", trace["dark"])
        write_image(d / "transmission.pgm", trace["transmission"])
        write_image(d / "f_up.ppm", np.clip(trace["f_up"][:, :3], 0.0, 1.0))
    if args.eval:
        ref = read_image(args.eval)
        if ref.shape != out.shape:
            raise ValidationError(f"reference extents {ref.shape[2:]} differ from output {out.shape[2:]}")
        print(json.dumps({"psnr": _json_float(psnr(out, ref)), "ssim": ssim(out, ref)}))
    return EXIT_OK


def cmd_attribute(args) -> int:
    cfg = ModelConfig.load(args.config) if args.config else ModelConfig()
    store = load_weights(args.weights, cfg) if args.weights else init_weights(cfg)
    image = read_image(args.input)
    if image.shape[1] != 3:
        raise ValidationError("input must be an RGB (P6) image")
    if image.shape[2] * image.shape[3] > MAX_ATTRIBUTION_PIXELS:
        raise ValidationError(
            f"attribution is limited to {MAX_ATTRIBUTION_PIXELS} pixels, got "
            f"{image.shape[2]}x{image.shape[3]}")
    try:
        pcfg = PathConfig(steps=args.steps, lam=args.lam if args.lam is not None else cfg.lam,
                          t_mid=cfg.t_mid, fd_epsilon=cfg.fd_epsilon)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    model = DehazeModel(cfg, store, np.float64)
    result = paam(model, image, pcfg)
    m = result.map
    lo, hi = float(m.min()), float(m.max())
    scaled = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    write_image(args.output, scaled, maxval=65535)
    meta = {"steps": pcfg.steps, "lambda": pcfg.lam, "t_mid": pcfg.t_mid,
            "fd_epsilon": pcfg.fd_epsilon, "min": lo, "max": hi}
    atomic_write(str(args.output) + ".json", json.dumps(meta, indent=2) + "\n")
    return EXIT_OK


def cmd_synth(args) -> int:
    clean = read_image(args.clean)
    if clean.shape[1] != 3:
        raise ValidationError("clean image must be RGB (P6)")
    h, w = clean.shape[2:]
    if args.t_map:
        t = read_image(args.t_map)[:, :1]
        if t.shape[2:] != (h, w):
            raise ValidationError(f"t-map extents {t.shape[2:]} differ from image {(h, w)}")
    else:
        if not 0.0 <= args.t <= 1.0:
            raise ValidationError(f"--t must lie in [0, 1], got {args.t}")
        t = np.full((1, 1, h, w), args.t, dtype=np.float32)
    try:
        a = tuple(float(v) for v in args.A.split(","))
    except ValueError:
        raise UsageError(f"--A expects r,g,b floats, got {args.A!r}") from None
    if len(a) != 3 or not all(0.0 <= v <= 1.0 for v in a):
        raise ValidationError(f"--A needs three values in [0, 1], got {args.A!r}")
    scene = HazeScene(clean, t, a, args.t_min)
    prefix = args.out_prefix
    write_image(f"{prefix}_clean.ppm", scene.clean)
    write_image(f"{prefix}_t.pgm", scene.transmission)
    write_image(f"{prefix}_hazy.ppm", synthesize_haze(scene))
    atomic_write(f"{prefix}.json",
                 json.dumps({"A": list(a), "t_min": args.t_min}, indent=2) + "\n")
    return EXIT_OK


def cmd_bench_cache(args) -> int:
    cfg = ModelConfig.load(args.config) if args.config else ModelConfig()
    res, c_a = load_schedule(args.schedule) if args.schedule else default_schedule()
    if any(not 0.0 <= v <= 1.0 for v in c_a):
        raise ValidationError("c_a schedule values must lie in [0, 1]")
    text = to_csv(bench_cache(cfg, res, c_a))
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from . import selftest
    return EXIT_OK if selftest.run() else EXIT_VALIDATION


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dehazekit", description="Physics-guided dehazing inference and analysis.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("dehaze", help="dehaze a PPM image")
    d.add_argument("input")
    d.add_argument("output")
    d.add_argument("--weights")
    d.add_argument("--config")
    d.add_argument("--eval", metavar="REF", help="print PSNR/SSIM against REF as JSON")
    d.add_argument("--debug-dumps", metavar="DIR")
    d.set_defaults(func=cmd_dehaze)

    a = sub.add_parser("attribute", help="physics-aware attribution map (16-bit PGM)")
    a.add_argument("input")
    a.add_argument("output")
    a.add_argument("--steps", type=int, default=32)
    a.add_argument("--lambda", dest="lam", type=float)
    a.add_argument("--weights")
    a.add_argument("--config")
    a.set_defaults(func=cmd_attribute)

    s = sub.add_parser("synth", help="synthesise a hazy image from a clean one")
    s.add_argument("clean")
    s.add_argument("out_prefix")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--t", type=float, default=0.5)
    g.add_argument("--t-map", metavar="P")
    s.add_argument("--A", default="0.8,0.8,0.8")
    s.add_argument("--t-min", type=float, default=0.1)
    s.set_defaults(func=cmd_synth)

    b = sub.add_parser("bench-cache", help="cache length/memory with and without eviction (CSV)")
    b.add_argument("--schedule", metavar="P")
    b.add_argument("--config")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench_cache)

    t = sub.add_parser("selftest", help="run the embedded invariant suite")
    t.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"dehazekit: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ImageFormatError) as exc:
        print(f"dehazekit: io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, ConfigError, WeightStoreError, ShapeError, ValueError) as exc:
        print(f"dehazekit: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``dequant {quantize,restore,gradcheck,traceplot,toygen}``.

Every option may also come from a JSON file given by ``--config``; keys are
option names (dashes or underscores) plus ``inputs`` for the positional list.
Values on the command line win over the file.

Exit codes: 0 success, 1 usage error, 2 validation or gradient-check failure,
3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .generator import ModelFormatError, load_model, make_toy_generator, save_model
from .gradcheck import CHECKS, TOLERANCE, run_gradcheck
from .image import (
    ChannelMismatchError,
    GrayscaleCoefficients,
    ImageFormatError,
    ImageTensor,
    ShapeMismatchError,
    load_image,
    mse,
    psnr,
    rgb_to_intensity,
    save_image,
)
from .quantizers import (
    DegenerateHistogramError,
    ThresholdQuantizer,
    UniformQuantizer,
    load_palette,
    otsu_threshold,
    quantize_palette,
    quantize_threshold,
    quantize_uniform,
)
from .restoration import DESK_CONFIG, FULL, IDENTITY, ObjectiveSpec, OptimizerConfig, read_trace_csv, restore_batch
from .restoration import delta_error_variance, write_delta_variance_csv
from .surrogates import DELTA_INIT, K_INIT, SoftPalette, SoftThreshold, SoftUniform, SurrogateParams

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_IO = 0, 1, 2, 3
PIPELINES = ("uniform", "colorize", "palette")
METRICS_HEADER = ["image", "variant", "error", "psnr", "k", "delta", "status"]
OTSU_SIDECAR = "otsu_thresholds.csv"

log = logging.getLogger("dequant")


class CliError(Exception):
    def __init__(self, message, code=EXIT_VALIDATION):
        super().__init__(message)
        self.code = code


def usage(message):
    return CliError(message, EXIT_USAGE)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- parser -------------------------------------------------------------------------

DEFAULTS = {
    "variant": FULL,
    "iters": DESK_CONFIG.iterations,
    "lr": DESK_CONFIG.lr,
    "momentum": DESK_CONFIG.momentum,
    "seed": 0,
    "restarts": 1,
    "stride": DESK_CONFIG.stride,
    "select": DESK_CONFIG.select,
    "workers": os.cpu_count() or 1,
    "k0": K_INIT,
    "points": 100,
    "otsu": False,
    "estimate_delta": False,
    "samples": 0,
}


def _add_pipeline(p):
    p.add_argument("--pipeline", choices=PIPELINES, default=None)
    p.add_argument("--m", type=int, default=None, help="levels per channel (uniform pipeline)")
    p.add_argument("--delta", type=float, default=None, help="known binarization threshold (colorize)")
    p.add_argument("--otsu", action="store_true", default=None, help="per-image Otsu threshold (colorize)")
    p.add_argument("--palette", default=None, help="palette file, one 'r g b' per line (palette pipeline)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dequant", description="Restore quantized images with a generative prior.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    q = sub.add_parser("quantize", help="apply a hard quantizer to images")
    q.add_argument("inputs", nargs="*", default=None)
    q.add_argument("--config", default=None)
    _add_pipeline(q)
    q.add_argument("--out", default=None, help="output directory")

    r = sub.add_parser("restore", help="MAP restoration of quantized observations")
    r.add_argument("inputs", nargs="*", default=None)
    r.add_argument("--config", default=None)
    _add_pipeline(r)
    r.add_argument("--variant", choices=(FULL, IDENTITY), default=None)
    r.add_argument("--generator", default=None, help="model file or toy spec like toy:mlp:seed=0,shape=16x16x3")
    r.add_argument("--truth", nargs="+", default=None, help="ground-truth images, one per input, for metrics")
    r.add_argument("--estimate-delta", action="store_true", default=None,
                   help="treat the colorize threshold as unknown and estimate it")
    r.add_argument("--k0", type=float, default=None, help="initial surrogate sharpness")
    r.add_argument("--iters", type=int, default=None)
    r.add_argument("--lr", type=float, default=None)
    r.add_argument("--momentum", type=float, default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--restarts", type=int, default=None)
    r.add_argument("--stride", type=int, default=None, help="trace subsampling stride")
    r.add_argument("--select", choices=("best", "last"), default=None, help="iterate reported by each run")
    r.add_argument("--workers", type=int, default=None)
    r.add_argument("--out", default=None, help="output directory")

    g = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    g.add_argument("--config", default=None)
    g.add_argument("--points", type=int, default=None)
    g.add_argument("--corrupt", choices=sorted(CHECKS), default=None, help=argparse.SUPPRESS)

    t = sub.add_parser("traceplot", help="ensemble squared error of the threshold estimate per iteration")
    t.add_argument("inputs", nargs="*", default=None, help="trace CSV files")
    t.add_argument("--config", default=None)
    t.add_argument("--delta", type=float, nargs="+", default=None,
                   help="true threshold, one value for all traces or one per trace")
    t.add_argument("--deltas", default=None, help="CSV with image,delta rows (e.g. the Otsu sidecar)")
    t.add_argument("--out", default=None, help="output CSV (default: stdout)")

    m = sub.add_parser("toygen", help="write a toy generator model and optional sample images")
    m.add_argument("--config", default=None)
    m.add_argument("--generator", default=None, help="toy spec like toy:mlp:seed=0,shape=16x16x3")
    m.add_argument("--out", default=None, help="model file path")
    m.add_argument("--samples", type=int, default=None, help="also write this many images G(z), z ~ N(0, I)")
    m.add_argument("--seed", type=int, default=None)
    parser.commands = {"quantize": q, "restore": r, "gradcheck": g, "traceplot": t, "toygen": m}
    return parser


def _config_argv(config: dict, path) -> list[str]:
    """Render a config object as command-line tokens for the subcommand parser."""
    argv, inputs = [], []
    for key, value in config.items():
        dest = key.replace("-", "_")
        if dest in ("command", "config", "verbose"):
            raise CliError(f"config {path}: option {key!r} is not allowed in a config file")
        if dest == "inputs":
            inputs = [str(v) for v in (value if isinstance(value, list) else [value])]
            continue
        flag = "--" + dest.replace("_", "-")
        if isinstance(value, bool):
            if value:
                argv.append(flag)
        elif isinstance(value, list):
            argv += [flag, *(str(v) for v in value)]
        elif value is not None:
            argv += [flag, str(value)]
    return argv + (["--", *inputs] if inputs else [])


def _merge_config(parser, args):
    """Fill options left unset on the command line from the JSON config, then from DEFAULTS."""
    values = vars(args)
    if values.get("config"):
        path = Path(values["config"])
        try:
            config = json.loads(path.read_text())
        except OSError as exc:
            raise CliError(f"cannot read config {path}: {exc}", EXIT_IO) from exc
        except json.JSONDecodeError as exc:
            raise CliError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(config, dict):
            raise CliError(f"config {path} must hold a JSON object")
        sub = parser.commands[args.command]
        try:
            from_file = vars(sub.parse_args(_config_argv(config, path)))
        except SystemExit as exc:
            raise CliError(f"config {path}: invalid options for {args.command}") from exc
        for dest, value in from_file.items():
            if values.get(dest) is None or (dest == "inputs" and not values[dest]):
                values[dest] = value
    for dest, value in DEFAULTS.items():
        if dest in values and values[dest] is None:
            values[dest] = value
    return args


# --- helpers ------------------------------------------------------------------------

def parse_toy_spec(text: str):
    """``toy:KIND[:key=value,...]`` with keys seed, shape (HxWxC), latent, widths (AxB), gain."""
    parts = text.split(":", 2)
    if len(parts) < 2 or parts[0] != "toy":
        raise usage(f"not a toy generator spec: {text!r}")
    kwargs = {}
    for item in filter(None, (parts[2] if len(parts) == 3 else "").split(",")):
        key, _, value = item.partition("=")
        try:
            if key == "seed":
                kwargs["seed"] = int(value)
            elif key == "shape":
                kwargs["output_shape"] = tuple(int(v) for v in value.split("x"))
            elif key == "latent":
                kwargs["latent_dim"] = int(value)
            elif key == "widths":
                kwargs["widths"] = tuple(int(v) for v in value.split("x"))
            elif key == "gain":
                kwargs["output_gain"] = float(value)
            else:
                raise usage(f"unknown toy spec key {key!r}")
        except ValueError as exc:
            raise usage(f"bad toy spec value {item!r}") from exc
    try:
        return make_toy_generator(parts[1], **kwargs)
    except ValueError as exc:
        raise CliError(f"invalid toy generator: {exc}") from exc


def load_generator(text):
    if text is None:
        raise usage("--generator is required")
    if text.startswith("toy:"):
        return parse_toy_spec(text)
    try:
        return load_model(text)
    except OSError as exc:
        raise CliError(f"cannot read generator {text}: {exc}", EXIT_IO) from exc
    except ModelFormatError as exc:
        raise CliError(f"bad generator file {text}: {exc}") from exc


def _inputs(args):
    if not args.inputs:
        raise usage(f"{args.command} needs at least one input file")
    return [Path(p) for p in args.inputs]


def _check_pipeline(args):
    if args.pipeline is None:
        raise usage("--pipeline is required")
    if args.pipeline == "uniform":
        if args.m is None:
            raise usage("uniform pipeline needs --m")
        if args.m < 1:
            raise CliError(f"--m must be at least 1, got {args.m}")
    elif args.pipeline == "colorize":
        if args.otsu and args.delta is not None:
            raise usage("give either --delta or --otsu, not both")
        if args.delta is not None and not 0.0 < args.delta < 1.0:
            raise CliError(f"--delta must lie in (0, 1), got {args.delta}")
    elif args.palette is None:
        raise usage("palette pipeline needs --palette")


def _read_palette(path):
    try:
        return load_palette(path)
    except OSError as exc:
        raise CliError(f"cannot read palette {path}: {exc}", EXIT_IO) from exc
    except ValueError as exc:
        raise CliError(f"bad palette {path}: {exc}") from exc


def _read_image(path):
    try:
        return load_image(path)
    except (OSError, ImageFormatError) as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from exc


def _intensity(img: ImageTensor) -> ImageTensor:
    return img if img.channels == 1 else rgb_to_intensity(img)


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}", EXIT_IO) from exc
    return out


def _fmt(value):
    return "" if value is None else repr(float(value))


# --- quantize -----------------------------------------------------------------------

def cmd_quantize(args) -> int:
    _check_pipeline(args)
    paths = _inputs(args)
    out = _out_dir(args)
    palette = _read_palette(args.palette) if args.pipeline == "palette" else None
    worst, otsu_rows = EXIT_OK, []
    for path in paths:
        try:
            img = _read_image(path)
            if args.pipeline == "uniform":
                result = quantize_uniform(img, UniformQuantizer(args.m))
            elif args.pipeline == "palette":
                result = quantize_palette(img, palette)
            else:
                intensity = _intensity(img)
                if args.otsu:
                    delta = otsu_threshold(intensity)
                    otsu_rows.append((path.stem, delta))
                else:
                    delta = DELTA_INIT if args.delta is None else args.delta
                result = quantize_threshold(intensity, ThresholdQuantizer(delta))
            target = out / f"{path.stem}.{args.pipeline}.png"
            try:
                save_image(result, target)
            except OSError as exc:
                raise CliError(f"cannot write {target}: {exc}", EXIT_IO) from exc
            log.info("wrote %s", target)
        except CliError as exc:
            log.error("%s", exc)
            worst = max(worst, exc.code)
        except (ChannelMismatchError, DegenerateHistogramError) as exc:
            log.error("%s: %s", path, exc)
            worst = max(worst, EXIT_VALIDATION)
    if args.otsu and args.pipeline == "colorize":
        with open(out / OTSU_SIDECAR, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["image", "delta"])
            writer.writerows((stem, repr(d)) for stem, d in otsu_rows)
    return worst


# --- restore ------------------------------------------------------------------------

@dataclass
class _Row:
    image: str
    error: float | None = None
    psnr: float | None = None
    k: float | None = None
    delta: float | None = None
    status: str = "ok"


def _surrogate(args, palette):
    if args.pipeline == "uniform":
        return SoftUniform(args.m), SurrogateParams.initial(k=args.k0), None
    if args.pipeline == "palette":
        return SoftPalette(palette), SurrogateParams.initial(k=args.k0), None
    estimate = bool(args.otsu or args.estimate_delta)
    delta = DELTA_INIT if estimate or args.delta is None else args.delta
    params = SurrogateParams.initial(k=args.k0, delta=delta, train_delta=estimate)
    return SoftThreshold(), params, GrayscaleCoefficients()


def _optimizer(args) -> OptimizerConfig:
    try:
        return OptimizerConfig(lr=args.lr, momentum=args.momentum, iterations=args.iters, seed=args.seed,
                               restarts=args.restarts, stride=args.stride, select=args.select)
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def cmd_restore(args) -> int:
    _check_pipeline(args)
    paths = _inputs(args)
    if args.truth is not None and len(args.truth) != len(paths):
        raise usage(f"--truth needs one image per input ({len(paths)}), got {len(args.truth)}")
    if args.k0 <= 0:
        raise CliError("--k0 must be positive")
    if args.workers < 1:
        raise CliError("--workers must be at least 1")
    config = _optimizer(args)
    generator = load_generator(args.generator)
    palette = _read_palette(args.palette) if args.pipeline == "palette" else None
    surrogate, params, grayscale = _surrogate(args, palette)
    out = _out_dir(args)
    tag = f"{args.pipeline}.{args.variant}"

    rows, specs, slots = [], [], []
    for path in paths:
        rows.append(_Row(path.stem))
        try:
            y = _read_image(path)
        except CliError as exc:
            log.error("%s", exc)
            rows[-1].status = str(exc)
            continue
        try:
            spec = ObjectiveSpec(generator, y, surrogate, params, args.variant, grayscale)
        except (ShapeMismatchError, ChannelMismatchError) as exc:
            raise CliError(f"{path}: {exc}") from exc
        specs.append(spec)
        slots.append(len(rows) - 1)

    truths = [None] * len(paths)
    if args.truth is not None:
        for i, t in enumerate(args.truth):
            try:
                truths[i] = _read_image(t)
            except CliError as exc:
                log.error("%s", exc)
                rows[i].status = str(exc)
            else:
                if truths[i].shape != generator.output_shape:
                    raise CliError(f"{t}: truth shape {truths[i].shape} does not match generator "
                                   f"output {generator.output_shape}")

    log.info("restoring %d image(s) with %s, variant %s", len(specs), generator, args.variant)
    results = restore_batch(specs, config, workers=args.workers, return_exceptions=True)
    worst = EXIT_OK if all(r.status == "ok" for r in rows) else EXIT_IO
    for spec, slot, result in zip(specs, slots, results):
        row = rows[slot]
        if isinstance(result, Exception):
            row.status = f"{type(result).__name__}: {result}"
            log.error("%s: %s", row.image, row.status)
            worst = max(worst, EXIT_VALIDATION)
            continue
        stem = f"{paths[slot].stem}.{tag}"
        try:
            save_image(result.xhat, out / f"{stem}.png")
            result.trace.write_csv(out / f"{stem}.trace.csv")
        except OSError as exc:
            row.status = f"cannot write outputs: {exc}"
            worst = EXIT_IO
            continue
        if spec.trains_k:
            row.k = result.k
        if isinstance(surrogate, SoftThreshold) and args.variant == FULL:
            row.delta = result.delta
        if truths[slot] is not None and row.status == "ok":
            row.error = mse(result.xhat, truths[slot])
            row.psnr = psnr(result.xhat, truths[slot])
        log.info("%s: loss %.6g%s", row.image, result.loss.total,
                 "" if row.psnr is None else f", psnr {row.psnr:.3f} dB")

    _write_metrics(out / f"metrics.{tag}.csv", rows, args.variant)
    return worst


def _mean(values):
    values = [v for v in values if v is not None]
    return sum(values) / len(values) if values else None


def _write_metrics(path, rows, variant):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for r in rows:
            writer.writerow([r.image, variant, _fmt(r.error), _fmt(r.psnr), _fmt(r.k), _fmt(r.delta), r.status])
        ok = [r for r in rows if r.status == "ok"]
        writer.writerow(["mean", variant, _fmt(_mean(r.error for r in ok)), _fmt(_mean(r.psnr for r in ok)),
                         _fmt(_mean(r.k for r in ok)), _fmt(_mean(r.delta for r in ok)),
                         f"{len(ok)}/{len(rows)} ok"])


# --- gradcheck ----------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    if args.points < 1:
        raise CliError("--points must be positive")
    results = run_gradcheck(points=args.points, corrupt=args.corrupt)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  {r.max_error:.3e}  {'PASS' if r.passed else 'FAIL'}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks below {TOLERANCE:g}")
    return EXIT_VALIDATION if failed else EXIT_OK


# --- traceplot ----------------------------------------------------------------------

def _truth_deltas(args, paths):
    if (args.delta is None) == (args.deltas is None):
        raise usage("give the true threshold with exactly one of --delta or --deltas")
    if args.delta is not None:
        if len(args.delta) == 1:
            return args.delta * len(paths)
        if len(args.delta) != len(paths):
            raise usage(f"--delta needs 1 or {len(paths)} values, got {len(args.delta)}")
        return list(args.delta)
    try:
        with open(args.deltas, newline="") as fh:
            table = {row["image"]: float(row["delta"]) for row in csv.DictReader(fh)}
    except OSError as exc:
        raise CliError(f"cannot read {args.deltas}: {exc}", EXIT_IO) from exc
    except (KeyError, ValueError) as exc:
        raise CliError(f"{args.deltas}: expected image,delta columns") from exc
    found = []
    for p in paths:
        # trace names start with the image stem; stems may themselves contain dots
        keys = [key for key in table if p.name.startswith(key + ".")]
        if not keys:
            raise CliError(f"{args.deltas} has no threshold for {p.name}")
        found.append(table[max(keys, key=len)])
    return found


def cmd_traceplot(args) -> int:
    paths = _inputs(args)
    truths = _truth_deltas(args, paths)
    traces, iters = [], None
    for p in paths:
        try:
            trace = read_trace_csv(p)
        except OSError as exc:
            raise CliError(f"cannot read {p}: {exc}", EXIT_IO) from exc
        except (KeyError, ValueError) as exc:
            raise CliError(f"{p}: malformed trace ({exc})") from exc
        if "delta" not in trace:
            raise CliError(f"{p}: trace has no delta column")
        if np.any(np.isnan(trace["delta"])):
            raise CliError(f"{p}: trace holds no threshold estimates")
        if iters is None:
            iters = trace["iter"]
        elif not np.array_equal(iters, trace["iter"]):
            raise CliError(f"{p}: iterations differ from {paths[0]}")
        traces.append(trace["delta"])
    variance = delta_error_variance(traces, truths)
    if args.out in (None, "-"):
        print("iter,delta_err_var")
        for t, v in zip(iters, variance):
            print(f"{int(t)},{float(v)!r}")
    else:
        write_delta_variance_csv(args.out, iters, variance)
    return EXIT_OK


# --- toygen -------------------------------------------------------------------------

def cmd_toygen(args) -> int:
    if args.generator is None or args.out is None:
        raise usage("toygen needs --generator and --out")
    if args.samples < 0:
        raise CliError("--samples must be nonnegative")
    generator = parse_toy_spec(args.generator)
    target = Path(args.out)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        save_model(generator, target)
        rng = np.random.default_rng(args.seed)
        for i in range(args.samples):
            save_image(generator.forward(rng.standard_normal(generator.latent_dim)),
                       target.with_name(f"{target.stem}.sample{i}.png"))
    except OSError as exc:
        raise CliError(f"cannot write {target}: {exc}", EXIT_IO) from exc
    log.info("wrote %s (%s)", target, generator)
    return EXIT_OK


COMMANDS = {
    "quantize": cmd_quantize,
    "restore": cmd_restore,
    "gradcheck": cmd_gradcheck,
    "traceplot": cmd_traceplot,
    "toygen": cmd_toygen,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        _merge_config(parser, args)
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"dequant: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())

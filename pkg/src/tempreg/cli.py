"""Command-line entry point: phantom, register, propagate, evaluate, info.

Exit codes: 0 success, 1 usage error, 2 data error, 3 non-convergence under --strict.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import DataError, TempRegError
from .evaluation import build_report, sample_frames
from .fileio import (
    Manifest,
    ResultWriter,
    StoredSeries,
    read_any,
    read_header,
    read_labels,
    write_field,
    write_labels,
    write_volume,
)
from .phantom import PhantomSpec, make_phantom
from .registration import RegConfig
from .temporal import MODES, RESERVED_MODES, SeriesInput, filter_series
from .volume import warp_labels

log = logging.getLogger("tempreg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_STRICT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _overrides(items):
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"override {item!r} is not key=value")
        out[key.strip()] = value.strip()
    return out


def build_parser():
    p = _Parser(prog="tempreg", description="Temporal registration of volumetric time series.")
    common = _Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log per-frame progress")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    ph = sub.add_parser("phantom", parents=[common], help="write a synthetic series with ground truth")
    ph.add_argument("--out", required=True, help="output directory")
    ph.add_argument("--seed", type=int, default=None)
    ph.add_argument("--config", help="phantom spec (JSON or key = value)")
    ph.add_argument("overrides", nargs="*", metavar="key=value")

    rg = sub.add_parser("register", parents=[common], help="estimate template-to-frame deformations")
    rg.add_argument("manifest")
    rg.add_argument("--out", required=True, help="results directory")
    rg.add_argument("--mode", default="sequential", help=f"one of {', '.join(MODES)}")
    rg.add_argument("--config", help="registration config (JSON or key = value)")
    rg.add_argument("--lambda2", type=float)
    rg.add_argument("--cc-radius", type=int)
    rg.add_argument("--levels", type=int)
    rg.add_argument("--workers", type=int, default=1, help="parallel frames (pairwise only)")
    rg.add_argument("--seed", type=int, default=None, help="accepted for uniformity; registration is deterministic")
    rg.add_argument("--strict", action="store_true", help="exit 3 if any frame fails to converge")
    rg.add_argument("overrides", nargs="*", metavar="key=value")

    pr = sub.add_parser("propagate", parents=[common], help="carry template labels into frames")
    pr.add_argument("results", help="results directory from 'register'")
    pr.add_argument("--labels", required=True, help="template label map")
    pr.add_argument("--frames", help="comma-separated 1-based frames (default: all)")
    pr.add_argument("--out", required=True)

    ev = sub.add_parser("evaluate", parents=[common], help="dice / endpoint-error report as CSV")
    ev.add_argument("manifest")
    ev.add_argument("--results", action="append", required=True, help="results directory (repeatable)")
    ev.add_argument("--out", required=True, help="CSV path")
    ev.add_argument("--sample", type=int, default=0, help="score N random frames instead of all")
    ev.add_argument("--seed", type=int, default=0)

    inf = sub.add_parser("info", parents=[common], help="print header metadata of a volume or field file")
    inf.add_argument("path")
    return p


def _reg_config(args):
    cfg = RegConfig.load(args.config) if args.config else RegConfig()
    flat = {}
    if args.lambda2 is not None:
        flat["lambda2"] = args.lambda2
    if args.cc_radius is not None:
        flat["cc.radius"] = args.cc_radius
    if args.levels is not None:
        flat["pyramid_levels"] = args.levels
    flat.update(_overrides(args.overrides))
    return cfg.with_overrides(flat) if flat else cfg


def cmd_phantom(args):
    try:
        spec = PhantomSpec.load(args.config) if args.config else PhantomSpec()
        flat = _overrides(args.overrides)
        if args.seed is not None:
            flat["seed"] = str(args.seed)
        spec = spec.with_overrides(flat) if flat else spec
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    ph = make_phantom(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(out / "template.mhd", ph.template)
    write_labels(out / "labels.mhd", ph.labels)
    frames, frame_labels, gt = [], [], []
    for n, (frame, lab, fwd) in enumerate(zip(ph.frames, ph.gt_labels, ph.gt_forward_fields), start=1):
        frames.append(Path("frames") / f"frame_{n:04d}.mhd")
        frame_labels.append(Path("truth") / f"labels_{n:04d}.mhd")
        gt.append(Path("truth") / f"forward_{n:04d}.mhd")
        write_volume(out / frames[-1], frame)
        write_labels(out / frame_labels[-1], lab)
        write_field(out / gt[-1], fwd)
    (out / "phantom.json").write_text(spec.to_json() + "\n")
    Manifest("template.mhd", frames, "labels.mhd", frame_labels, gt, case=f"seed{spec.seed}").save(
        out / "manifest.txt")
    print(f"wrote {len(frames)} frames to {out}")
    return EXIT_OK


def cmd_register(args):
    if args.mode in RESERVED_MODES:
        raise UsageError(f"mode {args.mode!r} is reserved and not implemented")
    if args.mode not in MODES:
        raise UsageError(f"unknown mode {args.mode!r}; choose from {', '.join(MODES)}")
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    try:
        cfg = _reg_config(args)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    manifest = Manifest.load(args.manifest)
    manifest.validate()
    series = SeriesInput(manifest.read_template(), manifest.frame_volumes())

    out = Path(args.out)
    writer = ResultWriter(out, args.mode)
    (out / "config.txt").write_text(cfg.to_text())

    def on_frame(fr, velocity, forward, inverse):
        writer(fr, velocity, forward, inverse)
        log.info("frame %d: data %.5f, min det %.3f, %d iters", fr.index, fr.data_term,
                 fr.min_jacobian, fr.iterations)

    try:
        result = filter_series(series, cfg, args.mode, on_frame=on_frame, keep_fields=False,
                               workers=args.workers)
    except BaseException:
        writer.abort()
        raise
    writer.close(result.flagged)
    print(f"{args.mode}: {len(result)} frames registered into {out}")
    if result.flagged:
        print(f"frames that did not converge: {', '.join(map(str, result.flagged))}", file=sys.stderr)
        if args.strict:
            return EXIT_STRICT
    return EXIT_OK


def _frame_list(text, n_frames):
    if not text:
        return list(range(1, n_frames + 1))
    try:
        frames = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"--frames must be comma-separated integers, got {text!r}") from None
    bad = [n for n in frames if not 1 <= n <= n_frames]
    if bad:
        raise UsageError(f"frame(s) {bad} out of range 1..{n_frames}")
    return frames


def cmd_propagate(args):
    stored = StoredSeries(args.results)
    labels = read_labels(args.labels)
    frames = _frame_list(args.frames, len(stored))
    out = Path(args.out)
    for n in frames:
        fr = stored.frame(n)
        if tuple(fr.inverse.dims) != tuple(labels.dims):
            raise DataError(f"{args.labels}: grid {tuple(labels.dims)} does not match frame {n} fields")
        write_labels(out / f"labels_{n:04d}.mhd", warp_labels(labels, fr.inverse))
    print(f"propagated labels to {len(frames)} frame(s) in {out}")
    return EXIT_OK


def cmd_evaluate(args):
    manifest = Manifest.load(args.manifest)
    manifest.validate()
    if not manifest.frame_labels:
        raise DataError(f"{args.manifest}: evaluation needs frame_labels entries")
    results = {}
    for path in args.results:
        stored = StoredSeries(path)
        if stored.mode in results:
            raise UsageError(f"two results directories for mode {stored.mode!r}")
        if len(stored) != len(manifest.frames):
            raise DataError(f"{path}: {len(stored)} frames stored, manifest lists {len(manifest.frames)}")
        results[stored.mode] = stored
    n = len(manifest.frames)
    frames = sample_frames(n, args.sample, args.seed) if args.sample else None
    ref = manifest.frame_label_maps()
    wanted = frames or range(1, n + 1)
    frame_labels = {k: ref[k - 1] for k in wanted}
    gt = manifest.gt_fields() if manifest.gt_forward else None
    modes = ("none",) + tuple(m for m in ("pairwise", "sequential", "concat") if m in results)
    report = build_report(results, manifest.read_labels(), frame_labels, gt, manifest.case, modes, frames)
    report.to_csv(args.out)
    print(report.summary())
    return EXIT_OK


def cmd_info(args):
    hdr = read_header(args.path)
    obj = read_any(args.path)
    kind = type(obj).__name__
    print(f"file: {hdr['path']}")
    print(f"type: {kind}")
    print(f"dims: {' '.join(map(str, hdr['dims']))}")
    print(f"spacing: {' '.join(f'{s:g}' for s in hdr['spacing'])}")
    print(f"element: {hdr['element_type']} x {hdr['channels']}")
    data = obj.data
    print(f"range: {data.min():.6g} .. {data.max():.6g}")
    if hdr["label_names"]:
        print("labels: " + ", ".join(f"{k}={v}" for k, v in sorted(hdr["label_names"].items())))
    return EXIT_OK


COMMANDS = {"phantom": cmd_phantom, "register": cmd_register, "propagate": cmd_propagate,
            "evaluate": cmd_evaluate, "info": cmd_info}


def run_cli(argv=None):
    """Run one command and return its exit code."""
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if not args.command:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        # key=value overrides may follow options
        if extra and hasattr(args, "overrides") and all("=" in e and not e.startswith("-") for e in extra):
            args.overrides = list(args.overrides) + extra
        elif extra:
            raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return EXIT_USAGE
    except (TempRegError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()

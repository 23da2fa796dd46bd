"""Command line: simulate, fuse, track and eval.

Exit codes: 0 success, 1 input or usage error, 2 internal invariant violation.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, load_pipeline_config, load_scenario
from .metrics import evaluate
from .observations import fuse_frame_detailed
from .pipeline import RunMode, prepare_frame, run
from .plotting import plot_by_range, range_label
from .simulator import simulate

log = logging.getLogger("coupledtrack")

EXIT_OK, EXIT_INPUT, EXIT_INVARIANT = 0, 1, 2


class UsageError(Exception):
    pass


class InvariantViolation(RuntimeError):
    """Output that breaks a guarantee of the pipeline."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "nan" if math.isnan(v) else f"{v:.6f}"


# -- subcommands ----------------------------------------------------------------

def cmd_simulate(args) -> int:
    spec = load_scenario(args.spec)
    gt, contexts, frames = simulate(spec, args.seed)
    io.write_sequence(args.out, [f[0] for f in frames], [f[1] for f in frames], contexts, gt)
    log.info("wrote %d frames to %s", len(contexts), args.out)
    return EXIT_OK


def _check_exclusive(result, n_det: int, n_prop: int, frame: int):
    dets = [o.det_index for o in result.observations]
    props = [o.prop_index for o in result.observations if o.prop_index is not None]
    if sorted(dets) != list(range(n_det)) or len(set(props)) != len(props) \
            or any(not 0 <= j < n_prop for j in props):
        raise InvariantViolation(f"frame {frame}: fused observations are not exclusive")


def cmd_fuse(args) -> int:
    config = load_pipeline_config(args.config)
    seq = io.read_sequence(args.inp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    observations = []
    with open(out / "fusion_diagnostics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["frame", "detections", "proposals", "candidate_pairs", "fused",
                         "partial", "energy"])
        for (dets, props), ctx in zip(seq.frames, seq.contexts):
            dets, props = prepare_frame(dets, props, RunMode())
            res = fuse_frame_detailed(dets, props, config.size_stats, ctx, config.fusion)
            _check_exclusive(res, len(dets), len(props), ctx.frame)
            n_fused = sum(o.fused for o in res.observations)
            writer.writerow([ctx.frame, len(dets), len(props), len(res.pairs), n_fused,
                             len(res.observations) - n_fused, _fmt(float(res.energy))])
            observations.append(res.observations)
    io.write_observations(out / "observations.txt", observations)
    return EXIT_OK


def _check_report(report):
    for frame in report.frames():
        rows = report[frame]
        ids = [r.track_id for r in rows]
        if len(set(ids)) != len(ids):
            raise InvariantViolation(f"frame {frame}: duplicate track ids")
        for r in rows:
            if not (np.all(np.isfinite(r.position)) and np.all(np.isfinite(r.bbox.as_array()))):
                raise InvariantViolation(f"frame {frame}: track {r.track_id} is not finite")


def cmd_track(args) -> int:
    config = load_pipeline_config(args.config)
    seq = io.read_sequence(args.inp)
    mode = RunMode(no_flow=args.no_flow, detections_only=args.detections_only,
                   coupling=args.coupling == "on", two_d_only=args.two_d_only)
    report = run(seq.frames, seq.contexts, config, mode)
    _check_report(report)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_results(report, out / "results.txt", seq.contexts)
    log.info("%d track rows over %d frames", len(report), len(seq.contexts))
    return EXIT_OK


def _locate(path, name: str) -> Path:
    path = Path(path)
    target = path / name if path.is_dir() else path
    if not target.is_file():
        raise FileNotFoundError(f"{target} not found")
    return target


def cmd_eval(args) -> int:
    if not 0 < args.iou_threshold < 1:
        raise UsageError("--iou-threshold must lie in (0, 1)")
    gt = io.read_gt(_locate(args.gt, "gt.txt"))
    report = io.read_results(_locate(args.results, "results.txt"))
    mot = evaluate(gt, report, args.iou_threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for name, value in mot.summary():
            writer.writerow([name, _fmt(value)])
    if args.by_range:
        stem = out.with_name(out.stem + "_by_range")
        with open(stem.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["range", "lo", "hi", "n_tp", "motp2d", "motp3d"])
            for r in mot.by_range:
                writer.writerow([range_label(r.lo, r.hi), _fmt(r.lo), _fmt(r.hi), r.n_tp,
                                 _fmt(r.motp2d), _fmt(r.motp3d)])
        plot_by_range({"tracker": mot}, stem.with_suffix(".png"))
    print(f"MOTA {mot.mota:.4f}  MOTP-2D {mot.motp2d:.4f}  MOTP-3D {mot.motp3d:.4f} m  "
          f"IDSW {mot.id_switches}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="coupledtrack", description="Coupled 2D-3D multi-object tracking.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic sequence directory")
    s.add_argument("--spec", required=True, help="scenario TOML (or builtin:NAME)")
    s.add_argument("--out", required=True, help="output sequence directory")
    s.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fuse", help="fuse detections with proposals, frame by frame")
    f.add_argument("--in", dest="inp", required=True, help="sequence directory")
    f.add_argument("--config", default=None, help="pipeline TOML (or builtin:NAME)")
    f.add_argument("--out", required=True, help="output directory")
    f.set_defaults(func=cmd_fuse)

    t = sub.add_parser("track", help="fuse and track a sequence")
    t.add_argument("--in", dest="inp", required=True, help="sequence directory")
    t.add_argument("--config", default=None, help="pipeline TOML (or builtin:NAME)")
    t.add_argument("--out", required=True, help="output directory for results.txt")
    t.add_argument("--no-flow", action="store_true", help="drop proposal velocities")
    t.add_argument("--detections-only", action="store_true", help="ignore proposals")
    t.add_argument("--coupling", choices=("on", "off"), default="on",
                   help="off decouples the 2D and 3D filters")
    t.add_argument("--2d-only", dest="two_d_only", action="store_true",
                   help="track in the image only")
    t.set_defaults(func=cmd_track)

    e = sub.add_parser("eval", help="CLEAR-MOT scores of results against ground truth")
    e.add_argument("--gt", required=True, help="gt.txt or a directory holding it")
    e.add_argument("--results", required=True, help="results.txt or a directory holding it")
    e.add_argument("--out", required=True, help="summary CSV")
    e.add_argument("--by-range", action="store_true",
                   help="also write per-distance CSV and PNG next to --out")
    e.add_argument("--iou-threshold", type=float, default=0.5)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:      # --help
        return EXIT_OK if not exc.code else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, io.FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InvariantViolation, AssertionError) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


cli = main

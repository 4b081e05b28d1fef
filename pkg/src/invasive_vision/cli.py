"""Command-line entry point.

Exit codes: 0 success, 1 usage or input error, 2 infeasible scenario.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from typing import Optional, Sequence

from . import harris
from .io_formats import (
    FormatError,
    corners_csv,
    csv_text,
    matches_csv,
    read_descriptors,
    read_pgm,
    write_descriptors,
    write_load_trace,
    write_pgm,
)
from .kdtree import DegenerateFit, build, calibrate_tfp, match_features
from .runtime import LoadTrace
from .scenario import (
    InfeasibleScenario,
    Scenario,
    ScenarioError,
    compare_variants,
    frames_csv,
    run_scenario,
    series_csv,
    table_csv,
)
from .scenes import KINDS, FrameSource
from .timing import TfpModel

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _emit(text: str, path: Optional[str]) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)


def _read(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _desc_format(path: str, explicit: Optional[str]) -> str:
    if explicit:
        return explicit
    return "binary" if path.endswith((".bin", ".desc")) else "csv"


def _load_scenario(args) -> Scenario:
    s = Scenario.load(args.scenario)
    if getattr(args, "variant", None):
        s = replace(s, variant=args.variant)
    if getattr(args, "frames", None):
        s = replace(s, frame_count=args.frames)
    return s


def cmd_simulate(args) -> int:
    s = _load_scenario(args)
    records, summary = run_scenario(s)
    table = table_csv([(s.variant, summary)])
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _emit(frames_csv(records), os.path.join(args.out, "frames.csv"))
        _emit(table, os.path.join(args.out, "summary.csv"))
    else:
        sys.stdout.write(table)
    return 0


def cmd_compare(args) -> int:
    s = _load_scenario(args)
    cmp = compare_variants(s)
    table = table_csv([("conventional", cmp.conv_summary), ("resource_aware", cmp.ra_summary)])
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _emit(table, os.path.join(args.out, "table.csv"))
        _emit(series_csv(cmp), os.path.join(args.out, "series.csv"))
    else:
        sys.stdout.write(table)
    return 0


def cmd_harris(args) -> int:
    img = read_pgm(_read(args.image))
    corners = harris.detect_conventional(
        img, args.k, args.threshold, args.nms_radius, args.window, args.window_radius
    )
    _emit(corners_csv([(0, corners)]), args.out)
    return 0


def cmd_nnsearch(args) -> int:
    tree_set = read_descriptors(_read(args.tree), _desc_format(args.tree, args.format))
    queries = read_descriptors(_read(args.queries), _desc_format(args.queries, args.format))
    if len(tree_set) == 0:
        raise UsageError("tree descriptor file is empty")
    tree = build(tree_set, args.leaf_capacity)
    result = match_features(queries, tree, args.leaves, args.threshold, ratio=args.ratio)
    _emit(matches_csv(result.matches), args.out)
    return 0


def cmd_calibrate(args) -> int:
    tree_set = read_descriptors(_read(args.tree), _desc_format(args.tree, args.format))
    queries = read_descriptors(_read(args.queries), _desc_format(args.queries, args.format))
    tree = build(tree_set, args.leaf_capacity)
    budgets = [int(b) for b in args.budgets.split(",") if b.strip()]
    cal = calibrate_tfp(tree, queries.values, budgets, TfpModel(args.alpha_true, args.beta_true))
    rows = [(cal.model.alpha, cal.model.beta, cal.residual_ms)]
    _emit(csv_text(("alpha_ms", "beta_ms", "residual_ms"), rows), args.out)
    return 0


def cmd_gen(args) -> int:
    if args.what == "trace":
        trace = LoadTrace.square_wave(args.low, args.high, args.half_period_ms, args.duration_ms)
        _emit(write_load_trace(trace).decode("ascii"), args.out)
        return 0
    if not args.out or args.out == "-":
        raise UsageError("gen frames/descriptors needs --out DIR")
    os.makedirs(args.out, exist_ok=True)
    src = FrameSource(args.kind, None, args.seed)
    if args.kind == "descriptor-clusters":
        fmt = args.format or "csv"
        ext = "bin" if fmt == "binary" else "csv"
        with open(os.path.join(args.out, f"training.{ext}"), "wb") as fh:
            fh.write(write_descriptors(src.training, fmt))
        rows = []
        for i in range(args.count):
            f = src.frame(i)
            with open(os.path.join(args.out, f"queries_{i:04d}.{ext}"), "wb") as fh:
                fh.write(write_descriptors(f.queries, fmt))
            rows.extend((i, int(qid), int(t)) for qid, t in zip(f.queries.ids, f.truth))
        _emit(csv_text(("frame", "query_id", "training_id"), rows), os.path.join(args.out, "truth.csv"))
        return 0
    rows = []
    for i in range(args.count):
        f = src.frame(i)
        with open(os.path.join(args.out, f"frame_{i:04d}.pgm"), "wb") as fh:
            fh.write(write_pgm(f.image))
        rows.extend((i, float(x), float(y)) for x, y in f.truth)
    _emit(csv_text(("frame", "x", "y"), rows), os.path.join(args.out, "truth.csv"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="invasive-vision", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("simulate", help="run one scenario variant")
    sp.add_argument("scenario")
    sp.add_argument("--variant", choices=("conventional", "resource_aware"))
    sp.add_argument("--frames", type=int)
    sp.add_argument("--out", help="directory for frames.csv and summary.csv")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("compare", help="paired conventional vs resource-aware run")
    sp.add_argument("scenario")
    sp.add_argument("--frames", type=int)
    sp.add_argument("--out", help="directory for table.csv and series.csv")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("harris", help="corners of one PGM image")
    sp.add_argument("image")
    sp.add_argument("--k", type=float, default=0.04)
    sp.add_argument("--threshold", type=float, default=1e7)
    sp.add_argument("--nms-radius", type=int, default=1)
    sp.add_argument("--window", choices=harris.WINDOW_KINDS, default="box")
    sp.add_argument("--window-radius", type=int, default=1)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_harris)

    for name, helptext in (("nnsearch", "match query descriptors against a tree"),
                           ("calibrate", "fit the per-feature search time model")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--tree", required=True)
        sp.add_argument("--queries", required=True)
        sp.add_argument("--format", choices=("csv", "binary"))
        sp.add_argument("--leaf-capacity", type=int, default=8)
        sp.add_argument("--out")
        if name == "nnsearch":
            sp.add_argument("--leaves", type=int, default=120)
            sp.add_argument("--threshold", type=float, default=150.0)
            sp.add_argument("--ratio", type=float)
            sp.set_defaults(func=cmd_nnsearch)
        else:
            sp.add_argument("--budgets", default="1,5,20,60,120")
            sp.add_argument("--alpha-true", type=float, default=TfpModel().alpha)
            sp.add_argument("--beta-true", type=float, default=TfpModel().beta)
            sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("gen", help="synthetic frames, descriptors or load traces")
    sp.add_argument("what", choices=("frames", "descriptors", "trace"))
    sp.add_argument("--kind", choices=KINDS)
    sp.add_argument("--count", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--format", choices=("csv", "binary"))
    sp.add_argument("--low", type=int, default=4)
    sp.add_argument("--high", type=int, default=28)
    sp.add_argument("--half-period-ms", type=int, default=4000)
    sp.add_argument("--duration-ms", type=int, default=20000)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_gen)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if args.command == "gen" and args.what != "trace":
        if args.kind is None:
            args.kind = "descriptor-clusters" if args.what == "descriptors" else "blobs"
        if (args.what == "descriptors") != (args.kind == "descriptor-clusters"):
            parser.error(f"kind {args.kind!r} does not produce {args.what}")
    try:
        return args.func(args)
    except InfeasibleScenario as exc:
        print(f"infeasible scenario: {exc}", file=sys.stderr)
        return 2
    except (ScenarioError, FormatError, DegenerateFit, UsageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

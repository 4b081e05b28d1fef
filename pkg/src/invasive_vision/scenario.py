"""End-to-end frame-stream experiments on the simulated many-core.

Every frame arriving at ``i * frame_interval_ms`` goes through one
invade / infect / retreat cycle.  The conventional variant runs its fixed
workload on whatever it was granted; the resource-aware variant shrinks the
workload (pruning threshold or leaf budget) to meet the frame interval.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from . import harris
from .io_formats import csv_text, read_config, read_load_trace
from .kdtree import InfeasibleBudget, KdTree, Match, adapt_leaf_count, build, required_pes
from .metrics import FrameRecord, RunSummary, count_correct, precision_recall, summarize
from .runtime import (
    US_PER_MS,
    LoadTrace,
    ParallelEfficiency,
    ResourceRequest,
    ResourceRuntime,
    RuntimeStateError,
    Topology,
    Workload,
    load_topology,
)
from .scenes import IMAGE_KINDS, FrameSource, SceneParams
from .timing import TfpModel, TimingModel


KERNELS = ("harris", "nn_search")
VARIANTS = ("conventional", "resource_aware")


class ScenarioError(ValueError):
    """Scenario description is malformed or inconsistent."""


class InfeasibleScenario(ScenarioError):
    """Scenario can never process a frame (e.g. a topology without PEs)."""


def square_wave_trace(duration_ms: int = 20000) -> LoadTrace:
    """4 s near idle (4 busy PEs) alternating with 4 s heavy load (28 busy PEs)."""
    return LoadTrace.square_wave(4, 28, 4000, duration_ms)


@dataclass
class Scenario:
    kernel: str = "harris"
    variant: str = "resource_aware"
    frame_kind: str = "blobs"
    frame_params: SceneParams = field(default_factory=SceneParams)
    frame_interval_ms: int = 100
    frame_count: int = 200
    seed: int = 0
    topology: Topology = field(default_factory=Topology)
    trace: LoadTrace = field(default_factory=square_wave_trace)
    timing: TimingModel = field(default_factory=TimingModel)
    # harris
    k: float = 0.04
    r_threshold: float = 1e7
    nms_radius: int = 1
    window_kind: str = "box"
    window_radius: int = 1
    match_tol: float = 2.0
    # nn_search
    leaf_capacity: int = 8
    n_leaf_best: int = 120
    n_leaf_min: int = 1
    match_threshold: float = 150.0
    ratio: Optional[float] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kernel not in KERNELS:
            raise ScenarioError(f"unknown kernel {self.kernel!r}")
        if self.variant not in VARIANTS:
            raise ScenarioError(f"unknown variant {self.variant!r}")
        if self.frame_interval_ms <= 0 or self.frame_count < 1:
            raise ScenarioError("need a positive frame interval and at least one frame")
        want_images = self.kernel == "harris"
        if want_images != (self.frame_kind in IMAGE_KINDS):
            raise ScenarioError(f"frame kind {self.frame_kind!r} does not fit kernel {self.kernel!r}")
        if not 1 <= self.n_leaf_min <= self.n_leaf_best:
            raise ScenarioError("need 1 <= n_leaf_min <= n_leaf_best")
        try:
            self.trace.check_against(self.topology)
        except ValueError as exc:
            raise ScenarioError(str(exc)) from None
        if self.topology.grant_cap < 1:
            raise InfeasibleScenario("topology cannot grant any PE")

    @property
    def efficiency(self) -> ParallelEfficiency:
        return self.timing.efficiency

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any], base_dir: str = ".") -> "Scenario":
        cfg = dict(cfg)
        known = {
            "kernel", "variant", "frame_interval_ms", "frame_count", "seed",
            "frames", "topology", "trace", "timing", "harris", "nn_search",
        }
        unknown = set(cfg) - known
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
        try:
            topology, eff = load_topology(cfg.get("topology", {}))
            frames = dict(cfg.get("frames", {}))
            kernel = cfg.get("kernel", "harris")
            kind = frames.pop("kind", "blobs" if kernel == "harris" else "descriptor-clusters")
            kw: dict[str, Any] = dict(
                kernel=kernel,
                variant=cfg.get("variant", "resource_aware"),
                frame_kind=kind,
                frame_params=SceneParams.from_mapping(frames.get("params")),
                frame_interval_ms=int(cfg.get("frame_interval_ms", 100)),
                frame_count=int(cfg.get("frame_count", 200)),
                seed=int(cfg.get("seed", 0)),
                topology=topology,
                trace=_trace_from_config(cfg.get("trace"), base_dir),
                timing=_timing_from_config(cfg.get("timing", {}), eff, SceneParams.from_mapping(frames.get("params"))),
            )
            for section, keys in (
                ("harris", ("k", "r_threshold", "nms_radius", "window_kind", "window_radius", "match_tol")),
                ("nn_search", ("leaf_capacity", "n_leaf_best", "n_leaf_min", "match_threshold", "ratio")),
            ):
                sec = dict(cfg.get(section) or {})
                bad = set(sec) - set(keys)
                if bad:
                    raise ScenarioError(f"unknown {section} keys: {sorted(bad)}")
                kw.update(sec)
            return cls(**kw)
        except ScenarioError:
            raise
        except (ValueError, TypeError, KeyError) as exc:
            raise ScenarioError(str(exc)) from None

    @classmethod
    def load(cls, path: str) -> "Scenario":
        with open(path, "rb") as fh:
            cfg = read_config(fh.read())
        return cls.from_config(cfg, os.path.dirname(os.path.abspath(path)))


def _trace_from_config(cfg, base_dir: str) -> LoadTrace:
    if cfg is None:
        return square_wave_trace()
    cfg = dict(cfg)
    if "file" in cfg:
        path = os.path.join(base_dir, cfg["file"])
        with open(path, "rb") as fh:
            return read_load_trace(fh.read(), cfg.get("duration_ms"))
    if "square_wave" in cfg:
        sw = dict(cfg["square_wave"])
        return LoadTrace.square_wave(
            int(sw.get("low", 4)), int(sw.get("high", 28)),
            int(sw.get("half_period_ms", 4000)), int(sw.get("duration_ms", 20000)),
        )
    if "constant" in cfg:
        return LoadTrace.constant(int(cfg["constant"]), int(cfg.get("duration_ms", 1000)))
    if "entries" in cfg:
        return LoadTrace(tuple(tuple(e) for e in cfg["entries"]), cfg.get("duration_ms"))
    raise ScenarioError("trace needs one of: file, square_wave, constant, entries")


def _timing_from_config(cfg, eff: ParallelEfficiency, frames: SceneParams) -> TimingModel:
    cfg = dict(cfg)
    known = {"full_frame_ms", "cr_fraction", "t_full_pixel_ms", "t_cr_pixel_ms", "tfp_alpha", "tfp_beta"}
    unknown = set(cfg) - known
    if unknown:
        raise ScenarioError(f"unknown timing keys: {sorted(unknown)}")
    base = TimingModel()
    tfp = TfpModel(float(cfg.get("tfp_alpha", base.tfp.alpha)), float(cfg.get("tfp_beta", base.tfp.beta)))
    if "full_frame_ms" in cfg:
        # per-frame cost refers to the configured frame size
        t = TimingModel.for_frame_cost(
            frames.width * frames.height,
            float(cfg["full_frame_ms"]),
            float(cfg.get("cr_fraction", 0.25)),
        )
        t_full, t_cr = t.t_full_pixel_ms, t.t_cr_pixel_ms
    else:
        t_full = float(cfg.get("t_full_pixel_ms", base.t_full_pixel_ms))
        t_cr = float(cfg.get("t_cr_pixel_ms", float(cfg.get("cr_fraction", 0.25)) * t_full))
    return TimingModel(t_full, t_cr, tfp, eff)


class _Kernel:
    """Per-run state shared by all frames of one scenario."""

    def __init__(self, s: Scenario, memo: Optional[dict] = None):
        self.s = s
        # (frame, query) -> (result, second-best distance) at n_leaf_best
        self.memo = memo
        self.source = FrameSource(s.frame_kind, s.frame_params, s.seed)
        self.tree: Optional[KdTree] = None
        if s.kernel == "nn_search":
            self.tree = build(self.source.training, s.leaf_capacity)

    def request(self, frame) -> int:
        s = self.s
        total = s.topology.total_pes
        if s.kernel == "harris":
            full = s.timing.harris_full_ms(frame.image.size)
            return max(1, s.efficiency.pes_for(full, s.frame_interval_ms, total))
        n_fp = len(frame.queries)
        eq4 = required_pes(n_fp, s.timing.tfp, s.n_leaf_best, s.frame_interval_ms)
        work = n_fp * s.timing.tfp(s.n_leaf_best)
        return max(1, eq4, s.efficiency.pes_for(work, s.frame_interval_ms, total))

    def search(self, frame_index: int, qi: int, q: np.ndarray, leaves: int):
        """Budgeted NN for one query; returns ``(NNResult, second_best_distance)``."""
        best = self.s.n_leaf_best
        if self.memo is None or leaves > best:
            trace = self.tree.search_trace(q, leaves)
            return trace.at(leaves), trace.second_at(leaves)
        key = (frame_index, qi)
        if leaves == best and key in self.memo:
            return self.memo[key]
        # search prefixes do not depend on the budget, so one trace serves both
        trace = self.tree.search_trace(q, best)
        self.memo[key] = (trace.at(best), trace.second_at(best))
        return trace.at(leaves), trace.second_at(leaves)


def run_scenario(
    s: Scenario,
    grants: Optional[Sequence[Optional[int]]] = None,
    memo: Optional[dict] = None,
) -> tuple[list[FrameRecord], RunSummary]:
    """Run the frame stream.

    ``grants`` replays a recorded per-frame PE grant instead of asking for the
    estimated need.  ``memo`` shares search results between runs over the
    same frames and changes no output.
    """
    if grants is not None and len(grants) < s.frame_count:
        raise ScenarioError("grant replay is shorter than the frame stream")
    runtime = ResourceRuntime(s.topology, s.trace, s.efficiency)
    kernel = _Kernel(s, memo)
    interval_us = s.frame_interval_ms * US_PER_MS
    busy_until = 0
    records: list[FrameRecord] = []
    for i in range(s.frame_count):
        now = i * interval_us
        frame = kernel.source.frame(i)
        truth = _truth_count(s, frame)
        if now < busy_until:
            records.append(FrameRecord(i, now, 0, 0, True, truth=truth))
            continue
        requested = kernel.request(frame)
        ask = requested if grants is None else grants[i]
        if not ask:
            records.append(FrameRecord(i, now, 0, 0, True, truth=truth, requested_pes=requested))
            continue
        claim = runtime.invade(ResourceRequest(ask, s.kernel), now)
        try:
            if claim.size == 0:
                rec = FrameRecord(i, now, 0, 0, True, truth=truth)
            elif s.kernel == "harris":
                rec = _harris_frame(s, runtime, claim, frame, i, now)
            else:
                rec = _nn_frame(s, runtime, kernel, claim, frame, i, now)
        finally:
            runtime.retreat(claim)
        if runtime.held_pes:
            raise RuntimeStateError(f"frame {i} leaked {runtime.held_pes} PEs")
        rec.requested_pes = requested
        if not rec.dropped:
            busy_until = now + rec.duration_us
        records.append(rec)
    return records, summarize(records, s.frame_interval_ms)


def _truth_count(s: Scenario, frame) -> int:
    if s.kernel == "harris":
        return len(frame.truth)
    return frame.object_features


def _harris_frame(s, runtime, claim, frame, i, now) -> FrameRecord:
    img = frame.image
    if s.variant == "conventional":
        corners = harris.detect_conventional(
            img, s.k, s.r_threshold, s.nms_radius, s.window_kind, s.window_radius
        )
        duration = runtime.infect(claim, Workload(img.size, s.timing.t_full_pixel_ms))
        knob = 0.0
    else:
        try:
            res = harris.detect_adaptive(
                img, claim, s.frame_interval_ms, s.timing, s.k, s.r_threshold,
                s.nms_radius, s.window_kind, s.window_radius, runtime=runtime,
            )
        except harris.FrameSkip:
            return FrameRecord(i, now, claim.size, 0, True, truth=len(frame.truth))
        corners, duration, knob = res.corners, res.duration_us, res.cr_threshold
    p, r = precision_recall(corners, frame.truth, s.match_tol)
    return FrameRecord(
        i, now, claim.size, duration, False, corners, p, r,
        matched=len(corners),
        correct=count_correct(corners, frame.truth, s.match_tol),
        truth=len(frame.truth),
        knob=knob,
    )


def _nn_frame(s, runtime, kernel, claim, frame, i, now) -> FrameRecord:
    queries = frame.queries
    n_fp = len(queries)
    truth = frame.object_features
    tfp = s.timing.tfp
    if n_fp == 0:
        return FrameRecord(i, now, claim.size, 0, False, [], 1.0, 1.0, truth=0)
    if s.variant == "resource_aware":
        try:
            leaves = adapt_leaf_count(
                claim.size, s.frame_interval_ms, s.efficiency(claim.size), n_fp, tfp,
                s.n_leaf_best, s.n_leaf_min,
            )
        except InfeasibleBudget:
            return FrameRecord(i, now, claim.size, 0, True, truth=truth)
        capacity = None
    else:
        leaves = s.n_leaf_best
        capacity = s.efficiency.speedup(claim.size) * s.frame_interval_ms
    matches: list[Match] = []
    correct = 0
    spent = 0.0
    for qi, (qid, gt) in enumerate(zip(queries.ids.tolist(), frame.truth.tolist())):
        res, second = kernel.search(i, qi, queries.values[qi], leaves)
        cost = tfp(res.leaves_visited)
        if capacity is not None and spent + cost > capacity:
            # fixed-effort search ran out of time: remaining features are lost
            break
        spent += cost
        if res.sq_distance > s.match_threshold:
            continue
        if s.ratio is not None and res.sq_distance > s.ratio ** 2 * second:
            continue
        matches.append(Match(qid, res.id, res.sq_distance))
        correct += res.id == gt
    duration = runtime.infect(claim, Workload(spent))
    if matches:
        precision = correct / len(matches)
    else:
        precision = 1.0 if truth == 0 else 0.0
    recall = correct / truth if truth else 1.0
    return FrameRecord(
        i, now, claim.size, duration, False, matches, precision, recall,
        matched=len(matches), correct=correct, truth=truth, knob=float(leaves),
    )


@dataclass
class Comparison:
    resource_aware: list[FrameRecord]
    conventional: list[FrameRecord]
    ra_summary: RunSummary
    conv_summary: RunSummary


def compare_variants(base: Scenario) -> Comparison:
    """Run both variants on identical frames with the resource-aware grants replayed."""
    ra = replace(base, variant="resource_aware")
    memo: dict = {}
    ra_records, ra_summary = run_scenario(ra, memo=memo)
    grants = [r.granted_pes for r in ra_records]
    conv = replace(base, variant="conventional")
    conv_records, conv_summary = run_scenario(conv, grants=grants, memo=memo)
    return Comparison(ra_records, conv_records, ra_summary, conv_summary)


FRAME_HEADER = (
    "frame", "arrival_ms", "requested_pes", "granted_pes", "duration_ms", "dropped",
    "precision", "recall", "matched", "correct", "truth", "knob",
)
TABLE_HEADER = ("variant", "throughput", "wcet_ratio", "precision", "recall")
SERIES_HEADER = (
    "frame", "requested_pes", "granted_pes",
    "conv_dropped", "conv_duration_ms", "conv_precision", "conv_recall", "conv_matched",
    "ra_dropped", "ra_duration_ms", "ra_precision", "ra_recall", "ra_matched", "ra_knob",
)


def frames_csv(records: Sequence[FrameRecord]) -> str:
    return csv_text(FRAME_HEADER, (
        (r.frame_index, r.arrival_us / 1000.0, r.requested_pes, r.granted_pes, r.duration_ms,
         int(r.dropped), float(r.precision), float(r.recall), r.matched, r.correct, r.truth,
         float(r.knob))
        for r in records
    ))


def table_csv(rows: Sequence[tuple[str, RunSummary]]) -> str:
    return csv_text(TABLE_HEADER, (
        (name, float(s.throughput), float(s.wcet_ratio), float(s.precision), float(s.recall))
        for name, s in rows
    ))


def series_csv(cmp: Comparison) -> str:
    return csv_text(SERIES_HEADER, (
        (ra.frame_index, ra.requested_pes, ra.granted_pes,
         int(cv.dropped), cv.duration_ms, float(cv.precision), float(cv.recall), cv.matched,
         int(ra.dropped), ra.duration_ms, float(ra.precision), float(ra.recall), ra.matched,
         float(ra.knob))
        for ra, cv in zip(cmp.resource_aware, cmp.conventional)
    ))

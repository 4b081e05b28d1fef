"""Per-frame quality and run-level timing metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class FrameRecord:
    frame_index: int
    arrival_us: int
    granted_pes: int
    duration_us: int
    dropped: bool
    detections: list = field(default_factory=list)
    precision: float = 0.0
    recall: float = 0.0
    matched: int = 0
    correct: int = 0
    truth: int = 0
    requested_pes: int = 0
    knob: float = 0.0  # CR threshold (Harris) or leaf count (NN)

    def __post_init__(self):
        if self.dropped:
            if self.detections or self.precision or self.recall or self.matched:
                raise ValueError("a dropped frame carries no detections and zero quality")

    @property
    def duration_ms(self) -> float:
        return self.duration_us / 1000.0


@dataclass(frozen=True)
class RunSummary:
    frames: int
    drops: int
    throughput: float
    wcet_ratio: float
    precision: float
    recall: float
    mean_matched: float
    pooled_precision: float
    pooled_recall: float


def precision_recall(detected, ground_truth, tol: float = 2.0) -> tuple[float, float]:
    """Greedy one-to-one matching within ``tol`` pixels, closest pairs first.

    Pair order depends on distance, detection coordinates and ground-truth
    index only, so it does not change when detections are reordered.
    """
    correct = count_correct(detected, ground_truth, tol)
    n_det, n_gt = len(detected), len(ground_truth)
    if n_det == 0:
        precision = 1.0 if n_gt == 0 else 0.0
    else:
        precision = correct / n_det
    recall = 1.0 if n_gt == 0 else correct / n_gt
    return precision, recall


def count_correct(detected, ground_truth, tol: float = 2.0) -> int:
    if tol < 0:
        raise ValueError("tolerance must be non-negative")
    if len(detected) == 0 or len(ground_truth) == 0:
        return 0
    det = np.asarray([(p[0], p[1]) for p in detected], dtype=float)
    gt = np.asarray([(p[0], p[1]) for p in ground_truth], dtype=float)
    d = np.hypot(det[:, None, 0] - gt[None, :, 0], det[:, None, 1] - gt[None, :, 1])
    di, gi = np.nonzero(d <= tol)
    order = np.lexsort((gi, det[di, 1], det[di, 0], d[di, gi]))
    used_det: set[int] = set()
    used_gt: set[int] = set()
    for k in order:
        i, j = int(di[k]), int(gi[k])
        if i in used_det or j in used_gt:
            continue
        used_det.add(i)
        used_gt.add(j)
    return len(used_gt)


def summarize(records: Sequence[FrameRecord], nominal_ms: float) -> RunSummary:
    if not records:
        raise ValueError("cannot summarize an empty run")
    if nominal_ms <= 0:
        raise ValueError("nominal interval must be positive")
    n = len(records)
    drops = sum(r.dropped for r in records)
    done = [r.duration_us for r in records if not r.dropped]
    wcet = max(done) / 1000.0 / nominal_ms if done else 0.0
    detected = sum(r.matched for r in records)
    correct = sum(r.correct for r in records)
    truth = sum(r.truth for r in records)
    return RunSummary(
        frames=n,
        drops=drops,
        throughput=1.0 - drops / n,
        wcet_ratio=wcet,
        precision=math.fsum(r.precision for r in records) / n,
        recall=math.fsum(r.recall for r in records) / n,
        mean_matched=detected / n,
        pooled_precision=correct / detected if detected else 0.0,
        pooled_recall=correct / truth if truth else 0.0,
    )


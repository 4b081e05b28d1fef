"""Seeded synthetic frames with analytic ground truth.

Image kinds return 8-bit frames with their true corner positions (computed
before noise is added).  ``descriptor-clusters`` returns per-frame query sets
drawn around a fixed training set, with the source training id of every
query (``-1`` for background clutter).
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Any, Mapping, Optional

import numpy as np

from .kdtree import DIM, DescriptorSet

IMAGE_KINDS = ("checkerboard", "blobs", "white-square")
KINDS = IMAGE_KINDS + ("descriptor-clusters",)


@dataclass(frozen=True)
class SceneParams:
    width: int = 640
    height: int = 480
    noise: float = 2.0
    background: int = 40
    # checkerboard
    cells_x: int = 8
    cells_y: int = 8
    low: int = 40
    high: int = 200
    jitter: int = 0
    # white-square
    side: int = 0  # 0: 40% of the short image side
    # blobs
    blobs_min: int = 4
    blobs_max: int = 10
    blob_size_min: int = 24
    blob_size_max: int = 120
    blob_gap: int = 8
    # descriptor-clusters
    tree_size: int = 4000
    clusters: int = 4
    cluster_scale: float = 10.0
    cluster_spread: float = 1.0
    query_noise: float = 0.9
    features_min: int = 150
    features_max: int = 600
    clutter_fraction: float = 0.25

    @classmethod
    def from_mapping(cls, values: Optional[Mapping[str, Any]]) -> "SceneParams":
        values = dict(values or {})
        unknown = set(values) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown scene parameters: {sorted(unknown)}")
        base = cls()
        return replace(base, **{k: type(getattr(base, k))(v) for k, v in values.items()})


@dataclass
class ImageFrame:
    image: np.ndarray
    truth: np.ndarray  # (n, 2) x, y


@dataclass
class DescriptorFrame:
    queries: DescriptorSet
    truth: np.ndarray  # training id per query, -1 for clutter

    @property
    def object_features(self) -> int:
        return int(np.count_nonzero(self.truth >= 0))


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def _finish(canvas: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    if noise > 0:
        canvas = canvas + rng.normal(0.0, noise, canvas.shape)
    return np.clip(np.rint(canvas), 0, 255).astype(np.uint8)


def checkerboard(p: SceneParams, rng: np.random.Generator) -> ImageFrame:
    cw, ch = p.width // p.cells_x, p.height // p.cells_y
    ox = int(rng.integers(0, p.jitter + 1)) if p.jitter else 0
    oy = int(rng.integers(0, p.jitter + 1)) if p.jitter else 0
    xs = np.arange(p.width)
    ys = np.arange(p.height)
    cx = np.floor_divide(xs - ox, cw)
    cy = np.floor_divide(ys - oy, ch)
    parity = (cy[:, None] + cx[None, :]) % 2
    canvas = np.where(parity == 1, p.high, p.low).astype(float)
    lines_x = [ox + i * cw for i in range(-1, p.cells_x + 2) if 1 <= ox + i * cw < p.width]
    lines_y = [oy + j * ch for j in range(-1, p.cells_y + 2) if 1 <= oy + j * ch < p.height]
    truth = np.array([(x - 0.5, y - 0.5) for y in lines_y for x in lines_x], dtype=float)
    return ImageFrame(_finish(canvas, p.noise, rng), truth.reshape(-1, 2))


def _rect_corners(x0, y0, x1, y1):
    return [(x0, y0), (x1 - 1, y0), (x0, y1 - 1), (x1 - 1, y1 - 1)]


def white_square(p: SceneParams, rng: np.random.Generator) -> ImageFrame:
    side = p.side or int(0.4 * min(p.width, p.height))
    margin = 4
    x0 = (p.width - side) // 2
    y0 = (p.height - side) // 2
    if p.jitter:
        x0 += int(rng.integers(-p.jitter, p.jitter + 1))
        y0 += int(rng.integers(-p.jitter, p.jitter + 1))
    x0 = int(np.clip(x0, margin, p.width - side - margin))
    y0 = int(np.clip(y0, margin, p.height - side - margin))
    canvas = np.full((p.height, p.width), float(p.background))
    canvas[y0 : y0 + side, x0 : x0 + side] = 255
    truth = np.array(_rect_corners(x0, y0, x0 + side, y0 + side), dtype=float)
    return ImageFrame(_finish(canvas, p.noise, rng), truth)


def blobs(p: SceneParams, rng: np.random.Generator) -> ImageFrame:
    """Non-overlapping axis-aligned rectangles of random size and intensity."""
    canvas = np.full((p.height, p.width), float(p.background))
    wanted = int(rng.integers(p.blobs_min, p.blobs_max + 1))
    placed: list[tuple[int, int, int, int]] = []
    truth = []
    margin = max(4, p.blob_gap // 2)
    for _ in range(wanted * 50):
        if len(placed) == wanted:
            break
        w = int(rng.integers(p.blob_size_min, p.blob_size_max + 1))
        h = int(rng.integers(p.blob_size_min, p.blob_size_max + 1))
        if w + 2 * margin >= p.width or h + 2 * margin >= p.height:
            continue
        x0 = int(rng.integers(margin, p.width - w - margin))
        y0 = int(rng.integers(margin, p.height - h - margin))
        g = p.blob_gap
        if any(x0 < bx1 + g and bx0 < x0 + w + g and y0 < by1 + g and by0 < y0 + h + g
               for bx0, by0, bx1, by1 in placed):
            continue
        placed.append((x0, y0, x0 + w, y0 + h))
        canvas[y0 : y0 + h, x0 : x0 + w] = int(rng.integers(p.background + 60, 256))
        truth.extend(_rect_corners(x0, y0, x0 + w, y0 + h))
    return ImageFrame(_finish(canvas, p.noise, rng), np.array(truth, dtype=float).reshape(-1, 2))


_IMAGE_MAKERS = {"checkerboard": checkerboard, "blobs": blobs, "white-square": white_square}


def training_set(p: SceneParams, seed: int) -> DescriptorSet:
    rng = _rng(seed, 0xD5)
    centers = rng.normal(0.0, p.cluster_scale, (p.clusters, DIM))
    labels = rng.integers(0, p.clusters, p.tree_size)
    values = centers[labels] + rng.normal(0.0, p.cluster_spread, (p.tree_size, DIM))
    return DescriptorSet.from_array(values)


def descriptor_frame(
    p: SceneParams, training: DescriptorSet, rng: np.random.Generator
) -> DescriptorFrame:
    n = int(rng.integers(p.features_min, p.features_max + 1))
    n_clutter = int(round(n * p.clutter_fraction))
    n_obj = n - n_clutter
    src = rng.choice(len(training), size=n_obj, replace=False) if n_obj <= len(training) \
        else rng.integers(0, len(training), n_obj)
    obj = training.values[src]
    if p.query_noise > 0:
        obj = obj + rng.normal(0.0, p.query_noise, obj.shape)
    # clutter sits well away from every training cluster
    clutter = rng.normal(0.0, p.cluster_scale, (n_clutter, DIM)) * 1.5
    values = np.vstack([obj, clutter]) if n_clutter else obj
    truth = np.concatenate([training.ids[src], -np.ones(n_clutter, dtype=np.int64)])
    order = rng.permutation(n)
    return DescriptorFrame(DescriptorSet.from_array(values[order]), truth[order])


class FrameSource:
    """Deterministic frame ``i`` for a (kind, params, seed) triple."""

    def __init__(self, kind: str, params: Optional[Mapping[str, Any]] = None, seed: int = 0):
        if kind not in KINDS:
            raise ValueError(f"unknown frame kind {kind!r}; expected one of {KINDS}")
        self.kind = kind
        self.params = params if isinstance(params, SceneParams) else SceneParams.from_mapping(params)
        self.seed = int(seed)
        self.training = training_set(self.params, self.seed) if kind == "descriptor-clusters" else None

    def frame(self, i: int):
        rng = _rng(self.seed, 1, i)
        if self.kind == "descriptor-clusters":
            return descriptor_frame(self.params, self.training, rng)
        return _IMAGE_MAKERS[self.kind](self.params, rng)


def generate_frames(kind: str, params=None, seed: int = 0, count: int = 1):
    """Return ``(frames, truths)`` for ``count`` consecutive frames."""
    src = FrameSource(kind, params, seed)
    frames = [src.frame(i) for i in range(count)]
    if kind == "descriptor-clusters":
        return [f.queries for f in frames], [f.truth for f in frames]
    return [f.image for f in frames], [f.truth for f in frames]

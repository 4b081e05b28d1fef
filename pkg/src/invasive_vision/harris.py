"""Harris corner detection, conventional and budget-pruned.

The resource-aware variant first computes the cheap pruning response
``|Ix * Iy|`` for every pixel, picks a threshold so that the remaining work
fits the granted PEs before the deadline, and evaluates the full Harris
measure only where it can still produce a corner.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy import ndimage

from .runtime import ResourceClaim, ResourceRuntime, Workload, parallel_duration_us
from .timing import TimingModel

WINDOW_KINDS = ("box", "gaussian")
HIST_BINS = 256


class FrameSkip(Exception):
    """The granted resources cannot process this frame at all."""


class GradientPair(NamedTuple):
    ix: np.ndarray
    iy: np.ndarray


class Corner(NamedTuple):
    x: int
    y: int
    response: float


@dataclass(frozen=True)
class StructureTensorField:
    a: np.ndarray  # sum W * Ix^2
    b: np.ndarray  # sum W * Ix * Iy
    c: np.ndarray  # sum W * Iy^2
    window_kind: str
    window_radius: int


@dataclass
class AdaptiveResult:
    corners: list[Corner]
    duration_us: int
    cr_threshold: float
    evaluated_pixels: int
    serial_ms: float

    def __iter__(self):
        # unpacks as (corners, duration_us)
        return iter((self.corners, self.duration_us))


def check_image(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {arr.shape}")
    if arr.shape[0] < 3 or arr.shape[1] < 3:
        raise ValueError(f"image must be at least 3x3, got {arr.shape[1]}x{arr.shape[0]}")
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError("intensities must lie in [0, 255]")
    return arr


def gradients(img) -> GradientPair:
    """3x3 Sobel gradients with replicated borders, in int64."""
    p = np.pad(check_image(img).astype(np.int64), 1, mode="edge")
    h, w = p.shape[0] - 2, p.shape[1] - 2

    def s(dy, dx):
        return p[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]

    ix = (s(-1, 1) - s(-1, -1)) + 2 * (s(0, 1) - s(0, -1)) + (s(1, 1) - s(1, -1))
    iy = (s(1, -1) - s(-1, -1)) + 2 * (s(1, 0) - s(-1, 0)) + (s(1, 1) - s(-1, 1))
    return GradientPair(ix, iy)


def window_weights(kind: str, radius: int) -> np.ndarray:
    if kind not in WINDOW_KINDS:
        raise ValueError(f"unknown window kind {kind!r}; expected one of {WINDOW_KINDS}")
    if radius < 1:
        raise ValueError("window radius must be >= 1")
    size = 2 * radius + 1
    if kind == "box":
        return np.full((size, size), 1.0 / (size * size))
    sigma = radius / 2.0
    d = np.arange(-radius, radius + 1, dtype=float)
    g = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2 * sigma * sigma))
    return g / g.sum()


def _window_sums(planes, weights: np.ndarray, rows=None, cols=None):
    """Weighted window sums of each plane, clamped borders.

    With ``rows``/``cols`` only those pixels are evaluated.  Both paths add the
    same terms in the same order, so results agree bit for bit.
    """
    r = weights.shape[0] // 2
    padded = [np.pad(pl, r, mode="edge") for pl in planes]
    if rows is None:
        h, w = planes[0].shape
        out = [np.zeros((h, w)) for _ in planes]
    else:
        out = [np.zeros(len(rows)) for _ in planes]
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            wt = weights[dy + r, dx + r]
            for acc, pp in zip(out, padded):
                if rows is None:
                    acc += wt * pp[r + dy : r + dy + acc.shape[0], r + dx : r + dx + acc.shape[1]]
                else:
                    acc += wt * pp[rows + r + dy, cols + r + dx]
    return out


def _products(grads: GradientPair):
    ix = grads.ix.astype(float)
    iy = grads.iy.astype(float)
    return ix * ix, ix * iy, iy * iy


def structure_tensor(
    grads: GradientPair, window_kind: str = "box", window_radius: int = 1
) -> StructureTensorField:
    weights = window_weights(window_kind, window_radius)
    a, b, c = _window_sums(_products(grads), weights)
    return StructureTensorField(a, b, c, window_kind, window_radius)


def _check_k(k: float) -> None:
    if not 0.04 <= k <= 0.06:
        warnings.warn(f"Harris k={k} is outside the usual 0.04..0.06 range", stacklevel=3)


def _response(a, b, c, k):
    return (a * c - b * b) - k * (a + c) ** 2


def corner_response(field: StructureTensorField, k: float = 0.04) -> np.ndarray:
    _check_k(k)
    return _response(field.a, field.b, field.c, k)


def cr_plane(grads: GradientPair) -> np.ndarray:
    """Cheap pruning response ``|Ix * Iy|``."""
    return np.abs(grads.ix * grads.iy)


def prune_mask(grads: GradientPair, cr_threshold: float) -> np.ndarray:
    if cr_threshold < 0:
        raise ValueError("pruning threshold must be non-negative")
    return cr_plane(grads) >= cr_threshold


def _spread(values: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return values
    return ndimage.maximum_filter(values, size=2 * radius + 1, mode="constant", cval=0)


def histogram_edges(max_value: float) -> np.ndarray:
    """Threshold candidates: 257 edges of 256 bins, the last one above ``max_value``."""
    return max_value * np.arange(HIST_BINS + 1, dtype=float) / (HIST_BINS - 1)


def select_cr_threshold(grads: GradientPair, pixel_budget: int, spread: int = 0) -> float:
    """Smallest histogram edge leaving at most ``pixel_budget`` pixels.

    ``spread`` counts a pixel as surviving when any pixel within that
    Chebyshev radius survives, i.e. the pixels whose response must be known.
    """
    if pixel_budget < 0:
        raise ValueError("pixel budget must be non-negative")
    values = _spread(cr_plane(grads), spread)
    if pixel_budget >= values.size:
        return 0.0
    vmax = float(values.max())
    if vmax == 0:
        # integer responses: anything positive prunes everything
        return 1.0
    edges = histogram_edges(vmax)
    ordered = np.sort(values, axis=None)
    survivors = values.size - np.searchsorted(ordered, edges, side="left")
    ok = np.flatnonzero(survivors <= pixel_budget)
    return float(edges[ok[0]])


def non_max_suppression(
    response: np.ndarray,
    r_threshold: float,
    radius: int = 1,
    candidates: Optional[np.ndarray] = None,
) -> list[Corner]:
    """Local maxima above ``r_threshold`` in a square window.

    On equal responses the pixel first in row-major order wins.  Results are
    ordered by descending response, then row-major position.
    """
    h, w = response.shape
    keep = response > r_threshold
    if candidates is not None:
        keep &= candidates
    if radius > 0:
        p = np.pad(response, radius, mode="constant", constant_values=-np.inf)
        for dy in range(-radius, radius + 1):
            for dx in range(-radius, radius + 1):
                if dy == 0 and dx == 0:
                    continue
                other = p[radius + dy : radius + dy + h, radius + dx : radius + dx + w]
                if (dy, dx) < (0, 0):
                    keep &= response > other
                else:
                    keep &= response >= other
    ys, xs = np.nonzero(keep)
    vals = response[ys, xs]
    order = np.lexsort((xs, ys, -vals))
    return [Corner(int(xs[i]), int(ys[i]), float(vals[i])) for i in order]


def detect_conventional(
    img,
    k: float = 0.04,
    r_threshold: float = 1e7,
    nms_radius: int = 1,
    window_kind: str = "box",
    window_radius: int = 1,
) -> list[Corner]:
    grads = gradients(img)
    field = structure_tensor(grads, window_kind, window_radius)
    return non_max_suppression(corner_response(field, k), r_threshold, nms_radius)


def detect_adaptive(
    img,
    claim: ResourceClaim,
    deadline_ms: float,
    timing: TimingModel,
    k: float = 0.04,
    r_threshold: float = 1e7,
    nms_radius: int = 1,
    window_kind: str = "box",
    window_radius: int = 1,
    runtime: Optional[ResourceRuntime] = None,
) -> AdaptiveResult:
    """Prune low ``|Ix*Iy|`` pixels until the frame fits the claim and deadline.

    The reported corners are always a subset of :func:`detect_conventional`
    on the same parameters.  When the claim can afford the full frame no
    pruning pass is charged and the output is identical.

    Raises :class:`FrameSkip` for an empty claim or when even the pruning pass
    does not fit.
    """
    if deadline_ms <= 0:
        raise ValueError("deadline must be positive")
    if claim.size < 1:
        raise FrameSkip("no PEs granted")
    img = check_image(img)
    _check_k(k)
    n_pixels = img.size
    capacity_ms = timing.efficiency.speedup(claim.size) * deadline_ms

    grads = gradients(img)
    weights = window_weights(window_kind, window_radius)
    if math.floor(capacity_ms / timing.t_full_pixel_ms) >= n_pixels:
        a, b, c = _window_sums(_products(grads), weights)
        corners = non_max_suppression(_response(a, b, c, k), r_threshold, nms_radius)
        serial = n_pixels * timing.t_full_pixel_ms
        threshold, evaluated = 0.0, n_pixels
    else:
        cr_ms = n_pixels * timing.t_cr_pixel_ms
        budget = math.floor((capacity_ms - cr_ms) / timing.t_full_pixel_ms)
        if budget < 0:
            raise FrameSkip("pruning pass alone exceeds the deadline")
        threshold = select_cr_threshold(grads, budget, spread=nms_radius)
        cr = cr_plane(grads)
        survivors = cr >= threshold
        needed = _spread(cr, nms_radius) >= threshold
        rows, cols = np.nonzero(needed)
        evaluated = len(rows)
        response = np.full(img.shape, -np.inf)
        if evaluated:
            a, b, c = _window_sums(_products(grads), weights, rows, cols)
            response[rows, cols] = _response(a, b, c, k)
        corners = non_max_suppression(response, r_threshold, nms_radius, candidates=survivors)
        serial = cr_ms + evaluated * timing.t_full_pixel_ms

    if runtime is not None:
        duration = runtime.infect(claim, Workload(serial))
    else:
        duration = parallel_duration_us(serial, claim.size, timing.efficiency)
    return AdaptiveResult(corners, duration, threshold, evaluated, serial)

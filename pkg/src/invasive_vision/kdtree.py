"""KD-tree over 128-d descriptors with leaf-budgeted best-bin-first search.

Also holds the per-feature timing calibration and the PE-count / leaf-count
resource model used by the resource-aware matcher.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from .timing import TfpModel

DIM = 128


class InfeasibleBudget(Exception):
    """Not even the minimum leaf count fits the granted time."""


class DegenerateFit(ValueError):
    """Calibration points do not span more than one leaf count."""


@dataclass(frozen=True)
class DescriptorSet:
    ids: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.size == 0:
            values = values.reshape(0, DIM)
        if values.ndim != 2 or values.shape[1] != DIM:
            raise ValueError(f"descriptors must have {DIM} components, got shape {values.shape}")
        if len(ids) != len(values):
            raise ValueError("one id per descriptor required")
        if not np.all(np.isfinite(values)):
            raise ValueError("descriptor values must be finite")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("descriptor ids must be unique")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_array(cls, values, first_id: int = 0) -> "DescriptorSet":
        values = np.asarray(values, dtype=np.float64)
        return cls(np.arange(first_id, first_id + len(values)), values)

    def __len__(self) -> int:
        return len(self.ids)


def _as_set(descriptors) -> DescriptorSet:
    if isinstance(descriptors, DescriptorSet):
        return descriptors
    return DescriptorSet.from_array(descriptors)


def _sq_dists(block: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = block - q
    return np.add.reduce(diff * diff, axis=1)


class NNResult(NamedTuple):
    id: int
    sq_distance: float
    leaves_visited: int


@dataclass(frozen=True)
class SearchBudget:
    max_leaves: int

    def __post_init__(self):
        if self.max_leaves < 1:
            raise ValueError("leaf budget must be >= 1")


@dataclass
class KdTree:
    """Nodes are stored in flat lists; a child index ``< 0`` is leaf ``-child - 1``."""

    points: DescriptorSet
    leaf_capacity: int
    split_dim: list[int] = field(default_factory=list)
    split_value: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    leaf_rows: list[np.ndarray] = field(default_factory=list)
    leaf_blocks: list[np.ndarray] = field(default_factory=list)
    leaf_id_lists: list[list[int]] = field(default_factory=list)
    root: int = -1

    @property
    def leaf_count(self) -> int:
        return len(self.leaf_rows)

    @property
    def depth(self) -> int:
        def walk(node):
            if node < 0:
                return 0
            return 1 + max(walk(self.left[node]), walk(self.right[node]))

        return walk(self.root)

    def leaf_ids(self, leaf: int) -> np.ndarray:
        return self.points.ids[self.leaf_rows[leaf]]

    def search_trace(self, query, max_leaves: int) -> "SearchTrace":
        return _bbf(self, np.asarray(query, dtype=np.float64), max_leaves)


def build(descriptors, leaf_capacity: int = 8) -> KdTree:
    """Median split on the widest dimension until leaves fit ``leaf_capacity``.

    Points equal to the split value go right, matching the descent rule.
    """
    points = _as_set(descriptors)
    if len(points) == 0:
        raise ValueError("cannot build a tree from zero descriptors")
    if leaf_capacity < 1:
        raise ValueError("leaf capacity must be >= 1")
    tree = KdTree(points, leaf_capacity)
    data = points.values

    def make_leaf(rows):
        tree.leaf_rows.append(rows)
        tree.leaf_blocks.append(np.ascontiguousarray(data[rows]))
        tree.leaf_id_lists.append(points.ids[rows].tolist())
        return -len(tree.leaf_rows)

    def grow(rows):
        if len(rows) <= leaf_capacity:
            return make_leaf(rows)
        sub = data[rows]
        spread = sub.max(axis=0) - sub.min(axis=0)
        dim = int(np.argmax(spread))
        if spread[dim] == 0:
            # all points identical; cannot be separated under the tie rule
            return make_leaf(rows)
        coords = sub[:, dim]
        ordered = np.sort(coords, kind="stable")
        value = ordered[len(rows) // 2]
        if value == ordered[0]:
            value = ordered[ordered > ordered[0]][0]
        go_left = coords < value
        node = len(tree.split_dim)
        tree.split_dim.append(dim)
        tree.split_value.append(float(value))
        tree.left.append(0)
        tree.right.append(0)
        tree.left[node] = grow(rows[go_left])
        tree.right[node] = grow(rows[~go_left])
        return node

    tree.root = grow(np.arange(len(points)))
    return tree


@dataclass
class SearchTrace:
    """Best and second-best candidates after each visited leaf."""

    best_id: list[int]
    best_d: list[float]
    second_d: list[float]

    @property
    def leaves_visited(self) -> int:
        return len(self.best_id)

    def at(self, max_leaves: int) -> NNResult:
        n = min(max_leaves, self.leaves_visited)
        return NNResult(self.best_id[n - 1], self.best_d[n - 1], n)

    def second_at(self, max_leaves: int) -> float:
        return self.second_d[min(max_leaves, self.leaves_visited) - 1]


def _bbf(tree: KdTree, q: np.ndarray, max_leaves: int) -> SearchTrace:
    if max_leaves < 1:
        raise ValueError("leaf budget must be >= 1")
    if q.shape != (DIM,):
        raise ValueError(f"query must have {DIM} components")
    qa = q.tolist()
    dims, values, lefts, rights = tree.split_dim, tree.split_value, tree.left, tree.right
    best_d, best_id, second_d = math.inf, -1, math.inf
    trace = SearchTrace([], [], [])
    heap = [(0.0, 0, tree.root)]
    seq = 1
    visited = 0
    while heap and visited < max_leaves:
        bound, _, node = heapq.heappop(heap)
        if bound > best_d:
            break
        while node >= 0:
            diff = qa[dims[node]] - values[node]
            if diff < 0:
                near, far = lefts[node], rights[node]
            else:
                near, far = rights[node], lefts[node]
            sq = diff * diff
            heapq.heappush(heap, (sq if sq > bound else bound, seq, far))
            seq += 1
            node = near
        leaf = -node - 1
        dists = _sq_dists(tree.leaf_blocks[leaf], q).tolist()
        for did, dist in zip(tree.leaf_id_lists[leaf], dists):
            if dist < best_d or (dist == best_d and did < best_id):
                second_d = best_d
                best_d, best_id = dist, did
            elif dist < second_d:
                second_d = dist
        visited += 1
        trace.best_id.append(best_id)
        trace.best_d.append(best_d)
        trace.second_d.append(second_d)
    return trace


def nn_search(tree: KdTree, query, budget: Union[SearchBudget, int]) -> NNResult:
    max_leaves = budget.max_leaves if isinstance(budget, SearchBudget) else int(budget)
    return tree.search_trace(query, max_leaves).at(max_leaves)


def exact_nn(descriptors, query) -> tuple[int, float]:
    """Linear scan; equal distances resolve to the lowest id."""
    ds = _as_set(descriptors)
    if len(ds) == 0:
        raise ValueError("exact_nn needs a non-empty descriptor set")
    d = _sq_dists(ds.values, np.asarray(query, dtype=np.float64))
    m = d.min()
    return int(ds.ids[d == m].min()), float(m)


@dataclass
class Calibration:
    model: TfpModel
    residual_ms: float
    mean_leaves: list[float]
    mean_cost_ms: list[float]


def calibrate_tfp(
    tree: KdTree,
    sample_queries,
    budgets: Sequence[int],
    cost: TfpModel,
) -> Calibration:
    """Fit ``alpha + beta * leaves`` to per-query costs measured at each budget.

    ``cost`` is the simulated single-PE cost of a query as a function of the
    leaves it actually visited.
    """
    budgets = sorted(set(int(b) for b in budgets))
    if len(budgets) < 2:
        raise ValueError("calibration needs at least two distinct budgets")
    queries = np.asarray(sample_queries, dtype=np.float64).reshape(-1, DIM)
    if len(queries) == 0:
        raise ValueError("calibration needs at least one query")
    top = budgets[-1]
    traces = [tree.search_trace(q, top) for q in queries]
    mean_leaves, mean_cost = [], []
    for b in budgets:
        visited = np.array([t.at(b).leaves_visited for t in traces], dtype=float)
        mean_leaves.append(float(visited.mean()))
        mean_cost.append(float(np.mean([cost(v) for v in visited])))
    x = np.array(mean_leaves)
    y = np.array(mean_cost)
    if np.ptp(x) == 0:
        raise DegenerateFit("every budget visited the same number of leaves")
    A = np.column_stack([np.ones_like(x), x])
    (alpha, beta), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.sqrt(np.mean((A @ np.array([alpha, beta]) - y) ** 2)))
    return Calibration(TfpModel(max(0.0, float(alpha)), float(beta)), resid, mean_leaves, mean_cost)


def _exact(v) -> Fraction:
    # the shortest decimal that round-trips, so 0.01 means 1/100
    return Fraction(repr(float(v)))


def required_pes(n_fp: int, tfp: TfpModel, n_leaf_best: int, t_search: float) -> int:
    """PEs needed to search ``n_fp`` features at ``n_leaf_best`` leaves within ``t_search`` ms."""
    if t_search <= 0:
        raise ValueError("search interval must be positive")
    if n_fp < 0:
        raise ValueError("feature count must be non-negative")
    if n_fp == 0:
        return 0
    work = n_fp * (_exact(tfp.alpha) + _exact(tfp.beta) * n_leaf_best)
    return math.ceil(work / _exact(t_search))


def adapt_leaf_count(
    granted_pes: int,
    t_search: float,
    eta: float,
    n_fp: int,
    tfp: TfpModel,
    n_leaf_best: int,
    n_leaf_min: int = 1,
) -> int:
    """Largest leaf count whose search time fits the grant, capped at ``n_leaf_best``.

    Evaluated in exact rational arithmetic on the decimal values of the inputs so the result
    always satisfies ``tfp(n) <= granted * t_search * eta / n_fp``.
    """
    if granted_pes < 1:
        raise ValueError("need at least one granted PE")
    if n_fp < 1:
        raise ValueError("need at least one feature")
    if t_search <= 0 or eta <= 0:
        raise ValueError("search interval and efficiency must be positive")
    per_feature = granted_pes * _exact(t_search) * _exact(eta) / n_fp
    n = math.floor((per_feature - _exact(tfp.alpha)) / _exact(tfp.beta))
    if n < n_leaf_min:
        raise InfeasibleBudget(
            f"{float(per_feature):.6g} ms per feature is below tfp({n_leaf_min})"
        )
    return min(n, n_leaf_best)


class Match(NamedTuple):
    query_id: int
    tree_id: int
    sq_distance: float


@dataclass
class MatchResult:
    matches: list[Match]
    cost_ms: float
    leaves_visited: list[int]


def match_features(
    queries,
    tree: KdTree,
    budget: Union[SearchBudget, int],
    match_threshold: float,
    tfp: Optional[TfpModel] = None,
    ratio: Optional[float] = None,
) -> MatchResult:
    """Budgeted 1-NN per query; keep matches within ``match_threshold``.

    With ``ratio`` set, a match additionally needs ``d1 <= ratio**2 * d2``
    against the second-best candidate seen.  ``cost_ms`` is the serial
    single-PE search time under ``tfp`` at the leaves actually visited.
    """
    max_leaves = budget.max_leaves if isinstance(budget, SearchBudget) else int(budget)
    qs = _as_set(queries)
    tfp = tfp or TfpModel()
    matches, visited = [], []
    cost = 0.0
    for qid, q in zip(qs.ids, qs.values):
        trace = tree.search_trace(q, max_leaves)
        res = trace.at(max_leaves)
        visited.append(res.leaves_visited)
        cost += tfp(res.leaves_visited)
        if res.sq_distance > match_threshold:
            continue
        if ratio is not None and res.sq_distance > ratio * ratio * trace.second_at(max_leaves):
            continue
        matches.append(Match(int(qid), res.id, res.sq_distance))
    return MatchResult(matches, cost, visited)

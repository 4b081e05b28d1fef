import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from invasive_vision.kdtree import (
    DIM,
    DegenerateFit,
    DescriptorSet,
    InfeasibleBudget,
    SearchBudget,
    adapt_leaf_count,
    build,
    calibrate_tfp,
    exact_nn,
    match_features,
    nn_search,
    required_pes,
)
from invasive_vision.timing import TfpModel


def random_set(n, seed=0, scale=1.0):
    return DescriptorSet.from_array(np.random.default_rng(seed).normal(0, scale, (n, DIM)))


def brute_nn(ds, q):
    """Straight loop over every descriptor; lowest id wins ties."""
    best_id, best_d = None, math.inf
    for i, row in zip(ds.ids.tolist(), ds.values):
        d = float(sum((a - b) ** 2 for a, b in zip(row.tolist(), q.tolist())))
        if d < best_d or (d == best_d and i < best_id):
            best_id, best_d = i, d
    return best_id, best_d


def leaves_of(tree):
    """Leaf index of every id, by walking all paths from the root."""
    seen = {}
    stack = [tree.root]
    while stack:
        node = stack.pop()
        if node < 0:
            leaf = -node - 1
            for i in tree.leaf_ids(leaf).tolist():
                assert i not in seen
                seen[i] = leaf
        else:
            stack += [tree.left[node], tree.right[node]]
    return seen


# ---------------------------------------------------------------- descriptors


def test_descriptor_set_validation():
    with pytest.raises(ValueError):
        DescriptorSet(np.arange(2), np.zeros((2, 127)))
    with pytest.raises(ValueError):
        DescriptorSet(np.array([1, 1]), np.zeros((2, DIM)))
    bad = np.zeros((1, DIM))
    bad[0, 3] = np.nan
    with pytest.raises(ValueError):
        DescriptorSet(np.array([0]), bad)
    assert len(DescriptorSet(np.zeros(0), np.zeros((0, DIM)))) == 0


# ---------------------------------------------------------------- build


def test_single_descriptor_tree():
    t = build(random_set(1))
    assert t.leaf_count == 1 and t.depth == 0


def test_capacity_one_gives_one_leaf_per_point():
    assert build(random_set(37), leaf_capacity=1).leaf_count == 37


def test_leaves_partition_ids():
    ds = random_set(256, seed=4)
    t = build(ds, 8)
    where = leaves_of(t)
    assert sorted(where) == list(range(256))
    sizes = [len(t.leaf_ids(i)) for i in range(t.leaf_count)]
    assert min(sizes) >= 1 and max(sizes) <= 8


def test_storage_matches_descent_rule():
    ds = DescriptorSet.from_array(np.random.default_rng(1).integers(0, 3, (200, DIM)).astype(float))
    t = build(ds, 4)
    where = leaves_of(t)
    for i, v in zip(ds.ids.tolist(), ds.values):
        node = t.root
        while node >= 0:
            node = t.left[node] if v[t.split_dim[node]] < t.split_value[node] else t.right[node]
        assert where[i] == -node - 1


def test_identical_points_form_one_leaf():
    ds = DescriptorSet.from_array(np.ones((20, DIM)))
    assert build(ds, 4).leaf_count == 1


def test_build_rejects_empty_and_bad_capacity():
    with pytest.raises(ValueError):
        build(DescriptorSet(np.zeros(0), np.zeros((0, DIM))))
    with pytest.raises(ValueError):
        build(random_set(3), 0)


# ---------------------------------------------------------------- search


def test_full_budget_is_exact():
    ds = random_set(300, seed=2)
    t = build(ds, 8)
    for q in np.random.default_rng(3).normal(0, 1, (30, DIM)):
        got = nn_search(t, q, SearchBudget(t.leaf_count))
        assert (got.id, got.sq_distance) == pytest.approx(brute_nn(ds, q), rel=1e-12)


def test_self_query_budget_one():
    ds = DescriptorSet.from_array(np.random.default_rng(5).integers(0, 4, (300, DIM)).astype(float))
    t = build(ds, 8)
    for i in range(0, 300, 7):
        got = nn_search(t, ds.values[i], 1)
        assert got.sq_distance == 0.0
        assert np.array_equal(ds.values[ds.ids == got.id][0], ds.values[i])


def test_budget_twenty_admissible():
    ds = random_set(1000, seed=6)
    t = build(ds, 8)
    qs = np.random.default_rng(7).normal(0, 1, (100, DIM))
    equal = 0
    for q in qs:
        got = nn_search(t, q, 20)
        _, d = exact_nn(ds, q)
        assert got.sq_distance >= d
        equal += got.sq_distance == d
    assert 0 < equal <= 100


def test_search_budget_validated():
    with pytest.raises(ValueError):
        SearchBudget(0)
    t = build(random_set(10))
    with pytest.raises(ValueError):
        nn_search(t, np.zeros(DIM), 0)
    with pytest.raises(ValueError):
        nn_search(t, np.zeros(5), 1)


def test_exact_nn_examples():
    q = np.full(DIM, 0.5)
    assert exact_nn(DescriptorSet(np.array([9]), q[None]), q) == (9, 0.0)
    a, b = np.zeros(DIM), np.ones(DIM)
    ds = DescriptorSet(np.array([5, 2]), np.stack([a, b]))
    assert exact_nn(ds, q)[0] == 2
    with pytest.raises(ValueError):
        exact_nn(DescriptorSet(np.zeros(0), np.zeros((0, DIM))), q)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(20, 200))
def test_search_properties(seed, cap, n):
    rng = np.random.default_rng(seed)
    # coarse integer grid makes split and distance ties common
    ds = DescriptorSet.from_array(rng.integers(0, 3, (n, DIM)).astype(float))
    t = build(ds, cap)
    q = rng.integers(0, 3, DIM).astype(float)
    exact_id, exact_d = exact_nn(ds, q)
    trace = t.search_trace(q, t.leaf_count)
    prev = math.inf
    for b in range(1, t.leaf_count + 2):
        r = trace.at(b)
        assert r == nn_search(t, q, b)
        assert r.leaves_visited <= min(b, t.leaf_count)
        assert exact_d <= r.sq_distance <= prev
        prev = r.sq_distance
    full = nn_search(t, q, t.leaf_count)
    assert (full.id, full.sq_distance) == (exact_id, exact_d)


# ---------------------------------------------------------------- matching


def test_self_match_threshold_zero():
    ds = random_set(200, seed=8)
    t = build(ds, 8)
    res = match_features(ds, t, 1, 0.0)
    assert [(m.query_id, m.tree_id) for m in res.matches] == [(i, i) for i in range(200)]


def test_far_queries_unmatched():
    t = build(random_set(200, seed=9), 8)
    far = DescriptorSet.from_array(np.full((5, DIM), 1e3))
    assert match_features(far, t, 50, 10.0).matches == []


def test_match_cost_charged_per_query():
    ds = random_set(200, seed=10)
    t = build(ds, 8)
    tfp = TfpModel(0.1, 0.02)
    res = match_features(ds, t, 3, 1.0, tfp)
    assert res.cost_ms == pytest.approx(sum(tfp(v) for v in res.leaves_visited))


def test_ratio_test_filters_ambiguous():
    base = np.zeros((2, DIM))
    base[1, 0] = 1.0
    t = build(DescriptorSet.from_array(base), 1)
    q = np.zeros((1, DIM))
    q[0, 0] = 0.5  # equidistant from both
    assert len(match_features(q, t, 2, 10.0).matches) == 1
    assert match_features(q, t, 2, 10.0, ratio=0.8).matches == []


def test_match_count_monotone_in_budget():
    rng = np.random.default_rng(11)
    ds = random_set(1500, seed=11, scale=3.0)
    t = build(ds, 8)
    src = rng.choice(1500, 150, replace=False)
    qs = ds.values[src] + rng.normal(0, 1.2, (150, DIM))
    counts = [len(match_features(qs, t, b, 400.0).matches) for b in (1, 5, 20, 60, 120)]
    assert counts == sorted(counts)
    assert counts[0] < counts[-1]


# ---------------------------------------------------------------- calibration


def test_calibration_recovers_model():
    ds = random_set(2000, seed=12)
    t = build(ds, 8)
    qs = np.random.default_rng(13).normal(0, 1, (50, DIM))
    cal = calibrate_tfp(t, qs, [1, 5, 20, 60, 120], TfpModel(0.1, 0.05))
    assert cal.model.alpha == pytest.approx(0.1, rel=0.01)
    assert cal.model.beta == pytest.approx(0.05, rel=0.01)


def test_two_budgets_zero_residual():
    t = build(random_set(500, seed=14), 8)
    qs = np.random.default_rng(15).normal(0, 1, (10, DIM))
    cal = calibrate_tfp(t, qs, [2, 30], TfpModel(0.3, 0.07))
    assert cal.residual_ms == pytest.approx(0.0, abs=1e-12)


def test_saturated_budgets_degenerate():
    t = build(random_set(40, seed=16), 8)
    qs = np.random.default_rng(17).normal(0, 1, (5, DIM))
    with pytest.raises(DegenerateFit):
        calibrate_tfp(t, qs, [t.leaf_count, t.leaf_count + 10], TfpModel())


def test_calibration_needs_two_budgets():
    t = build(random_set(40), 8)
    with pytest.raises(ValueError):
        calibrate_tfp(t, np.zeros((1, DIM)), [5, 5], TfpModel())


# ---------------------------------------------------------------- resource model


@pytest.mark.parametrize(
    "n_fp,tfp,expected",
    [(1000, TfpModel(0.26, 0.002), 5), (0, TfpModel(), 0), (1000, TfpModel(0.45, 1e-9), 5)],
)
def test_required_pes_examples(n_fp, tfp, expected):
    assert required_pes(n_fp, tfp, 120, 100.0) == expected


def test_required_pes_ceiling():
    # 1000 * 0.45 / 100 = 4.5
    assert required_pes(1000, TfpModel(0.05, 0.4 / 120), 120, 100.0) == 5
    with pytest.raises(ValueError):
        required_pes(10, TfpModel(), 120, 0.0)


def test_adapt_round_trip_example():
    tfp = TfpModel(0.05, 0.01)
    n = required_pes(400, tfp, 120, 100.0)
    assert adapt_leaf_count(n, 100.0, 1.0, 400, tfp, 120) == 120


def test_adapt_halving_without_intercept():
    tfp = TfpModel(0.0, 0.01)
    full = required_pes(1000, tfp, 120, 100.0)
    assert full == 12
    assert adapt_leaf_count(full // 2, 100.0, 1.0, 1000, tfp, 120) == 60


def test_adapt_infeasible():
    tfp = TfpModel(0.5, 0.1)
    # 1 PE * 100 ms / 1000 features = 0.1 ms per feature < tfp(1) = 0.6
    with pytest.raises(InfeasibleBudget):
        adapt_leaf_count(1, 100.0, 1.0, 1000, tfp, 120)


def test_adapt_respects_minimum():
    tfp = TfpModel(0.0, 0.01)
    # 0.15 ms per feature -> 15 leaves, below a minimum of 20
    with pytest.raises(InfeasibleBudget):
        adapt_leaf_count(3, 100.0, 1.0, 2000, tfp, 120, n_leaf_min=20)
    assert adapt_leaf_count(3, 100.0, 1.0, 2000, tfp, 120, n_leaf_min=10) == 15


def test_adapt_preconditions():
    with pytest.raises(ValueError):
        adapt_leaf_count(0, 100.0, 1.0, 10, TfpModel(), 120)
    with pytest.raises(ValueError):
        adapt_leaf_count(1, 100.0, 1.0, 0, TfpModel(), 120)


def dec(x):
    return Fraction(repr(float(x)))


tfps = st.builds(TfpModel, st.floats(0, 1), st.floats(1e-4, 1))


@given(st.integers(0, 5000), st.integers(0, 5000), tfps, st.integers(1, 300),
       st.floats(1, 1000), st.floats(1, 1000))
def test_required_pes_monotone(n1, n2, tfp, best, t1, t2):
    n1, n2 = sorted((n1, n2))
    t1, t2 = sorted((t1, t2))
    assert required_pes(n1, tfp, best, t1) <= required_pes(n2, tfp, best, t1)
    assert required_pes(n1, tfp, best, t2) <= required_pes(n1, tfp, best, t1)
    slower = TfpModel(tfp.alpha, tfp.beta * 2)
    assert required_pes(n1, tfp, best, t1) <= required_pes(n1, slower, best, t1)


@given(st.integers(1, 5000), tfps, st.integers(1, 300), st.floats(1, 1000))
def test_round_trip_property(n_fp, tfp, best, t_search):
    n = required_pes(n_fp, tfp, best, t_search)
    assert adapt_leaf_count(n, t_search, 1.0, n_fp, tfp, best) == best


@given(st.integers(1, 64), st.floats(1, 1000), st.floats(0.1, 1), st.integers(1, 5000),
       tfps, st.integers(1, 300))
def test_adapt_satisfies_budget(granted, t_search, eta, n_fp, tfp, best):
    try:
        n = adapt_leaf_count(granted, t_search, eta, n_fp, tfp, best)
    except InfeasibleBudget:
        budget = granted * dec(t_search) * dec(eta) / n_fp
        assert dec(tfp.alpha) + dec(tfp.beta) > budget
        return
    assert 1 <= n <= best
    lhs = dec(tfp.alpha) + dec(tfp.beta) * n
    assert lhs <= granted * dec(t_search) * dec(eta) / n_fp
    assume(n < best)
    # floor: one more leaf would not fit
    assert lhs + dec(tfp.beta) > granted * dec(t_search) * dec(eta) / n_fp

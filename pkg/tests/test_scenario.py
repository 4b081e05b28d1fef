from dataclasses import replace

import numpy as np
import pytest

from invasive_vision.harris import detect_conventional
from invasive_vision.kdtree import exact_nn
from invasive_vision.scenario import (
    InfeasibleScenario,
    Scenario,
    ScenarioError,
    compare_variants,
    frames_csv,
    square_wave_trace,
    run_scenario,
    series_csv,
    table_csv,
)
from invasive_vision.scenes import FrameSource, SceneParams, generate_frames

SMALL = {"width": 160, "height": 120, "blobs_min": 2, "blobs_max": 5,
         "blob_size_min": 12, "blob_size_max": 40}


def harris_cfg(**over):
    cfg = {
        "kernel": "harris",
        "frame_count": 40,
        "frames": {"kind": "blobs", "params": SMALL},
        "trace": {"square_wave": {"low": 4, "high": 28, "half_period_ms": 1000,
                                  "duration_ms": 4000}},
        "timing": {"full_frame_ms": 1000},
    }
    cfg.update(over)
    return cfg


NN_PARAMS = {"tree_size": 1500, "features_min": 300, "features_max": 800}


def nn_cfg(**over):
    cfg = {
        "kernel": "nn_search",
        "frame_count": 30,
        "frames": {"kind": "descriptor-clusters", "params": NN_PARAMS},
        "trace": {"square_wave": {"low": 4, "high": 28, "half_period_ms": 1000,
                                  "duration_ms": 4000}},
    }
    cfg.update(over)
    return cfg


# ---------------------------------------------------------------- scenes


def test_checkerboard_truth_at_interior_junctions():
    frames, truths = generate_frames("checkerboard", {"noise": 0}, seed=0, count=1)
    assert frames[0].shape == (480, 640)
    assert len(truths[0]) == 49
    xs = sorted({x for x, _ in truths[0]})
    assert xs == [80 * i - 0.5 for i in range(1, 8)]


def test_blobs_deterministic():
    a = generate_frames("blobs", None, seed=7, count=3)
    b = generate_frames("blobs", None, seed=7, count=3)
    for fa, fb in zip(a[0], b[0]):
        assert np.array_equal(fa, fb)
    for ta, tb in zip(a[1], b[1]):
        assert np.array_equal(ta, tb)
    c = generate_frames("blobs", None, seed=8, count=1)
    assert not np.array_equal(a[0][0], c[0][0])


def test_blob_truth_is_rectangle_corners():
    src = FrameSource("blobs", dict(SMALL, noise=0), seed=1)
    f = src.frame(0)
    assert len(f.truth) % 4 == 0
    for x, y in f.truth.astype(int):
        assert f.image[y, x] != 40


def test_zero_noise_descriptors_truth_is_source():
    params = {"tree_size": 500, "query_noise": 0, "clutter_fraction": 0,
              "features_min": 100, "features_max": 100}
    src = FrameSource("descriptor-clusters", params, seed=2)
    f = src.frame(0)
    assert len(f.queries) == 100
    for q, gt in zip(f.queries.values[:20], f.truth[:20]):
        assert exact_nn(src.training, q) == (gt, 0.0)


def test_unknown_kind():
    with pytest.raises(ValueError):
        FrameSource("spirals")
    with pytest.raises(ValueError):
        SceneParams.from_mapping({"colour": 3})


# ---------------------------------------------------------------- scenario config


def test_scenario_defaults():
    s = Scenario()
    assert (s.frame_interval_ms, s.frame_count, s.variant) == (100, 200, "resource_aware")
    assert s.trace == square_wave_trace()
    assert s.trace.entries[:2] == ((0, 4), (4000, 28))


@pytest.mark.parametrize(
    "cfg",
    [
        {"kernel": "sift"},
        {"variant": "fast"},
        {"frame_interval_ms": 0},
        {"frame_count": 0},
        {"bogus": 1},
        {"kernel": "harris", "frames": {"kind": "descriptor-clusters"}},
        {"trace": {"constant": 33}},
        {"trace": {"sine": 3}},
        {"timing": {"speed": 2}},
        {"harris": {"sigma": 1}},
        {"topology": {"cores": 3}},
        {"nn_search": {"n_leaf_min": 200}},
    ],
)
def test_bad_configs(cfg):
    with pytest.raises(ScenarioError):
        Scenario.from_config(cfg)


def test_zero_pe_topology_is_infeasible():
    with pytest.raises(InfeasibleScenario):
        Scenario.from_config({"topology": {"tiles": 0}, "trace": {"constant": 0}})
    with pytest.raises(InfeasibleScenario):
        Scenario.from_config({"topology": {"max_grantable_pes": 0}})


def test_load_yaml(tmp_path):
    (tmp_path / "trace.csv").write_text("time_ms,busy_pes\n0,3\n500,9\n")
    (tmp_path / "s.yaml").write_text(
        "kernel: harris\nframe_count: 5\nseed: 4\ntrace:\n  file: trace.csv\n"
        "frames:\n  kind: white-square\n  params: {width: 64, height: 48}\n"
        "timing: {full_frame_ms: 500}\n"
    )
    s = Scenario.load(str(tmp_path / "s.yaml"))
    assert s.trace.entries == ((0, 3), (500, 9))
    assert s.frame_kind == "white-square" and s.frame_params.width == 64
    assert s.timing.harris_full_ms(64 * 48) == pytest.approx(500)


# ---------------------------------------------------------------- runs


def test_idle_trace_variants_identical():
    base = Scenario.from_config(harris_cfg(trace={"constant": 0}, frame_count=10))
    ra, ra_sum = run_scenario(base)
    conv, conv_sum = run_scenario(replace(base, variant="conventional"))
    assert ra_sum.throughput == conv_sum.throughput == 1.0
    assert [r.detections for r in ra] == [r.detections for r in conv]
    assert [r.duration_us for r in ra] == [r.duration_us for r in conv]


def test_idle_trace_nn_variants_identical():
    base = Scenario.from_config(nn_cfg(trace={"constant": 0}, frame_count=5))
    cmp = compare_variants(base)
    assert cmp.ra_summary.throughput == cmp.conv_summary.throughput == 1.0
    assert [r.detections for r in cmp.resource_aware] == [r.detections for r in cmp.conventional]


@pytest.mark.parametrize("cfg", [harris_cfg, nn_cfg])
def test_saturated_trace_drops_everything(cfg):
    base = Scenario.from_config(cfg(trace={"constant": 32}, frame_count=5))
    for variant in ("resource_aware", "conventional"):
        recs, summary = run_scenario(replace(base, variant=variant))
        assert summary.throughput == 0.0
        assert all(r.dropped and r.granted_pes == 0 for r in recs)
        assert summary.precision == summary.recall == 0.0


def test_square_wave_trace_harris():
    cmp = compare_variants(Scenario.from_config(harris_cfg()))
    ra, conv = cmp.ra_summary, cmp.conv_summary
    assert ra.throughput == 1.0 and ra.wcet_ratio <= 1.1
    assert conv.throughput < 1.0 and conv.wcet_ratio > 1.0
    assert ra.precision >= conv.precision and ra.recall >= conv.recall


def test_resource_aware_meets_deadline_and_subset():
    s = Scenario.from_config(harris_cfg())
    recs, _ = run_scenario(s)
    src = FrameSource(s.frame_kind, s.frame_params, s.seed)
    for r in recs:
        if r.dropped:
            continue
        assert r.duration_us <= 100_000
        conv = detect_conventional(src.frame(r.frame_index).image)
        assert set(r.detections) <= set(conv)


def test_conventional_overrun_drops_following_frames():
    s = Scenario.from_config(harris_cfg(variant="conventional"))
    recs, _ = run_scenario(s)
    busy_until = 0
    for r in recs:
        if r.arrival_us < busy_until:
            assert r.dropped and r.duration_us == 0
        elif not r.dropped:
            busy_until = r.arrival_us + r.duration_us


def test_compare_replays_grants():
    cmp = compare_variants(Scenario.from_config(nn_cfg()))
    for ra, cv in zip(cmp.resource_aware, cmp.conventional):
        assert ra.requested_pes == cv.requested_pes
        if not cv.dropped:
            assert cv.granted_pes == ra.granted_pes
        assert cv.matched <= ra.matched
    assert cmp.ra_summary.mean_matched >= cmp.conv_summary.mean_matched


def test_nn_resource_aware_meets_deadline():
    recs, _ = run_scenario(Scenario.from_config(nn_cfg()))
    assert all(r.duration_us <= 100_000 for r in recs if not r.dropped)
    assert any(r.knob < 120 for r in recs if not r.dropped)


def test_grant_replay_length_checked():
    s = Scenario.from_config(harris_cfg(frame_count=3))
    with pytest.raises(ScenarioError):
        run_scenario(s, grants=[1])


def test_reports_deterministic():
    s = Scenario.from_config(nn_cfg(frame_count=8))
    a, b = compare_variants(s), compare_variants(s)
    assert series_csv(a) == series_csv(b)
    assert frames_csv(a.resource_aware) == frames_csv(b.resource_aware)
    t = table_csv([("conventional", a.conv_summary), ("resource_aware", a.ra_summary)])
    assert t.splitlines()[0] == "variant,throughput,wcet_ratio,precision,recall"

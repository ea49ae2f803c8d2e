import numpy as np
import pytest
from scipy.spatial import distance as sp_dist

from frenetsim import synth
from frenetsim.metrics import (
    MetricReport,
    _histogram,
    _rect_corners,
    ade_fde,
    agent_offroad_flags,
    aggregate_collision_offroad,
    collision_offroad,
    evaluate_scenarios,
    js_distance,
    jsd_bundle,
    mmd,
    nearest_object_distances,
    rectangles_overlap,
    road_edge_distances,
)
from frenetsim.scene import AgentTrack, LaneGraph, MapPolyline, Scenario


def two_agent_scene(offset_y=20.0, n=40, speed=8.0, y0=0.0):
    """Two lanes at y=0 and y=20; agent 1 drives at y0+offset_y."""
    polys = (
        MapPolyline(0, np.array([[0.0, 0.0], [400.0, 0.0]])),
        MapPolyline(1, np.array([[0.0, 20.0], [400.0, 20.0]])),
    )
    x = 5.0 + speed * 0.1 * np.arange(n)
    a0 = AgentTrack(0, np.column_stack([x, np.full(n, y0), np.zeros(n)]))
    a1 = AgentTrack(1, np.column_stack([x, np.full(n, y0 + offset_y), np.zeros(n)]))
    return Scenario(polys, LaneGraph(), (a0, a1), t_now=10)


# ---------------------------------------------------------------------------
# ADE / FDE


def test_ade_fde_zero_for_identical():
    t = np.random.default_rng(0).normal(size=(30, 2))
    assert ade_fde([t], [t]) == (0.0, 0.0)


def test_ade_fde_constant_offset():
    t = np.zeros((25, 2))
    shifted = t + [2.0, 0.0]
    assert ade_fde([shifted], [t]) == pytest.approx((2.0, 2.0))


def test_ade_fde_linear_growth():
    T = 81
    t = np.zeros((T, 2))
    drift = np.column_stack([np.linspace(0.0, 4.0, T), np.zeros(T)])
    ade, fde = ade_fde([t + drift], [t])
    assert ade == pytest.approx(2.0, abs=0.05)
    assert fde == pytest.approx(4.0)


def test_ade_fde_rejects_mismatched_lengths():
    with pytest.raises(ValueError):
        ade_fde([np.zeros((10, 2))], [np.zeros((12, 2))])
    with pytest.raises(ValueError):
        ade_fde([np.zeros((10, 2))], [np.zeros((10, 2)), np.zeros((10, 2))])


def test_ade_fde_bounded_by_max_step_error():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 50, 2))
    ade, fde = ade_fde([a], [b])
    worst = np.hypot(*(a - b).T).max()
    assert ade <= worst + 1e-12 and fde <= worst + 1e-12


# ---------------------------------------------------------------------------
# JSD


def test_js_distance_matches_scipy():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = rng.uniform(0, 1, 16)
        q = rng.uniform(0, 1, 16)
        p, q = p / p.sum(), q / q.sum()
        want = sp_dist.jensenshannon(p, q, base=2)
        assert js_distance(p, q) == pytest.approx(want, abs=1e-12)


def test_js_distance_bounds():
    assert js_distance([0.5, 0.5, 0.0], [0.5, 0.5, 0.0]) == 0.0
    assert js_distance([1.0, 0.0], [0.0, 1.0]) == pytest.approx(1.0)


def test_histogram_matches_reference_with_clipping():
    rng = np.random.default_rng(3)
    vals = rng.normal(15.0, 12.0, 2000)  # plenty of out-of-range mass
    got = _histogram(vals, 0.0, 30.0, 30)
    edges = np.linspace(0.0, 30.0, 31)
    ref = np.histogram(np.clip(vals, 0.0, 30.0), bins=edges)[0] / len(vals)
    np.testing.assert_allclose(got, ref, atol=1e-12)
    assert got.sum() == pytest.approx(1.0)


def test_jsd_bundle_zero_for_identical_sets():
    scenes = [two_agent_scene(speed=s) for s in (6.0, 9.0)]
    assert jsd_bundle(scenes, scenes) == 0.0


def test_jsd_bundle_detects_disjoint_speeds():
    slow = [two_agent_scene(speed=2.0)]
    fast = [two_agent_scene(speed=14.0)]
    val = jsd_bundle(slow, fast)
    assert val > 0.2  # speed histograms are disjoint -> that distance is 1


def test_jsd_bundle_symmetric_and_errors():
    a = [two_agent_scene(speed=5.0)]
    b = [two_agent_scene(speed=7.0)]
    assert jsd_bundle(a, b) == pytest.approx(jsd_bundle(b, a), abs=1e-12)
    with pytest.raises(ValueError):
        jsd_bundle([], b)
    single = Scenario(
        (MapPolyline(0, np.array([[0.0, 0.0], [100.0, 0.0]])),),
        LaneGraph(),
        (AgentTrack(0, np.tile([5.0, 0.0, 0.0], (20, 1)) + np.column_stack([np.arange(20), np.zeros(20), np.zeros(20)])),),
        t_now=10,
    )
    with pytest.raises(ValueError, match="nearest_dist"):
        jsd_bundle([single], [single])


# ---------------------------------------------------------------------------
# collisions / off-road


def test_rectangles_flip_exactly_at_contact():
    a = _rect_corners(0.0, 0.0, 0.0, 4.8, 2.0)
    touching = _rect_corners(4.8, 0.0, 0.0, 4.8, 2.0)
    separated = _rect_corners(4.8 + 1e-9, 0.0, 0.0, 4.8, 2.0)
    overlapping = _rect_corners(4.8 - 1e-9, 0.0, 0.0, 4.8, 2.0)
    assert not rectangles_overlap(a, touching)
    assert not rectangles_overlap(a, separated)
    assert rectangles_overlap(a, overlapping)


def test_rotated_rectangle_overlap():
    a = _rect_corners(0.0, 0.0, 0.0, 4.0, 2.0)
    b = _rect_corners(3.0, 0.0, np.pi / 4, 4.0, 2.0)
    assert rectangles_overlap(a, b)
    c = _rect_corners(0.0, 3.5, np.pi / 2, 4.0, 2.0)
    assert not rectangles_overlap(a, c)
    # symmetry
    assert rectangles_overlap(b, a) and not rectangles_overlap(c, a)


def test_far_apart_agents_clean_report():
    # 100 m apart along the same lane, both on-road
    polys = (MapPolyline(0, np.array([[0.0, 0.0], [400.0, 0.0]])),)
    n = 40
    x = 5.0 + 0.8 * np.arange(n)
    a0 = AgentTrack(0, np.column_stack([x, np.zeros(n), np.zeros(n)]))
    a1 = AgentTrack(1, np.column_stack([x + 100.0, np.zeros(n), np.zeros(n)]))
    sc = Scenario(polys, LaneGraph(), (a0, a1), t_now=10)
    assert collision_offroad(sc) == (0.0, 0.0, 0.0)


def test_crossing_agents_collide():
    polys = (MapPolyline(0, np.array([[0.0, 0.0], [400.0, 0.0]])),)
    n = 30
    x = np.linspace(0, 20, n)
    a0 = AgentTrack(0, np.column_stack([x, np.zeros(n), np.zeros(n)]))
    a1 = AgentTrack(1, np.column_stack([x[::-1], np.zeros(n), np.zeros(n)]))
    sc = Scenario(polys, LaneGraph(), (a0, a1), t_now=5)
    col, off, scr = collision_offroad(sc)
    assert col == 1.0 and scr == 1.0


def test_offroad_flags():
    sc_on = two_agent_scene(offset_y=20.0, y0=0.0)  # a1 drives on polyline 1
    flags = agent_offroad_flags(sc_on)
    assert not flags.any()
    sc_off = two_agent_scene(offset_y=8.0, y0=0.0)  # a1 at y=8: between roads
    assert agent_offroad_flags(sc_off)[1]


def test_collision_permutation_invariance():
    sc = two_agent_scene()
    swapped = Scenario(sc.polylines, sc.graph, sc.agents[::-1], sc.t_now)
    assert collision_offroad(sc) == collision_offroad(swapped)


def test_aggregate_scr_counts_scenes():
    polys = (MapPolyline(0, np.array([[0.0, 0.0], [400.0, 0.0]])),)
    n = 30
    x = np.linspace(0, 20, n)
    a0 = AgentTrack(0, np.column_stack([x, np.zeros(n), np.zeros(n)]))
    a1 = AgentTrack(1, np.column_stack([x[::-1], np.zeros(n), np.zeros(n)]))
    crash = Scenario(polys, LaneGraph(), (a0, a1), t_now=5)
    clean = two_agent_scene()
    col, off, scr = aggregate_collision_offroad([crash, clean])
    assert scr == 0.5
    assert col == pytest.approx(0.5)


# ---------------------------------------------------------------------------
# MMD


def test_mmd_self_is_zero():
    X = np.random.default_rng(4).normal(size=(40, 2))
    assert mmd(X, X) < 1e-9


def test_mmd_separates_shifted_gaussians():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        base = mmd(rng.normal(0, 1, (500, 1)), rng.normal(0, 1, (500, 1)))
        shifted = mmd(rng.normal(0, 1, (500, 1)), rng.normal(5, 1, (500, 1)))
        assert shifted > base + 0.5


def test_mmd_symmetric():
    rng = np.random.default_rng(5)
    X = rng.normal(0, 1, (30, 2))
    Y = rng.normal(1, 2, (25, 2))
    assert abs(mmd(X, Y) - mmd(Y, X)) < 1e-12


def test_mmd_median_bandwidth_hand_value():
    X = np.array([[0.0], [1.0]])
    Y = np.array([[2.0], [4.0]])
    # pooled pairwise distances: 1,2,4,1,3,2 -> median 2 -> sigma = 2
    s2 = 2.0 * 2.0**2
    kxx = np.exp(-1.0 / s2)
    kyy = np.exp(-4.0 / s2)
    kxy = (np.exp(-4.0 / s2) + np.exp(-16.0 / s2) + np.exp(-1.0 / s2) + np.exp(-9.0 / s2)) / 4
    want = kxx + kyy - 2 * kxy
    assert mmd(X, Y) == pytest.approx(max(0.0, want), abs=1e-12)


def test_mmd_degenerate_and_errors():
    same = np.ones((5, 1))
    assert mmd(same, np.ones((4, 1))) == 0.0
    with pytest.raises(ValueError):
        mmd(np.ones((1, 1)), np.ones((5, 1)))


def test_mmd_scene_ordering_invariance():
    scenes = [two_agent_scene(speed=s) for s in (5.0, 8.0, 11.0)]
    a = nearest_object_distances(scenes)
    b = nearest_object_distances(scenes[::-1])
    assert mmd(a.reshape(-1, 1), b.reshape(-1, 1)) < 1e-9


def test_road_edge_distances_sign():
    on = two_agent_scene(offset_y=20.0)
    vals = road_edge_distances([on])
    assert np.all(vals > 0)
    off = two_agent_scene(offset_y=8.0)
    assert road_edge_distances([off])[1] < 0


# ---------------------------------------------------------------------------
# report


def test_metric_report_roundtrip_and_invariants():
    rep = MetricReport(1.0, 2.0, 0.03, 0.1, 0.0, 0.5, 0.01, 0.02)
    back = MetricReport.from_json(rep.to_json())
    assert back == rep
    with pytest.raises(ValueError):
        MetricReport(-1.0, 2.0, 0.03, 0.1, 0.0, 0.5, 0.01, 0.02)
    with pytest.raises(ValueError):
        MetricReport(1.0, 2.0, 0.03, 1.5, 0.0, 0.5, 0.01, 0.02)


def test_evaluate_scenarios_end_to_end():
    real = [synth.make_scenario({"kind": "straight", "lanes": 3, "length": 400.0}, 4, seed=s) for s in (0, 1)]
    rep = evaluate_scenarios(real, real)
    assert rep.ade == 0.0 and rep.fde == 0.0 and rep.jsd == 0.0
    assert rep.collision_rate == 0.0 and rep.offroad_rate == 0.0 and rep.scr == 0.0
    assert rep.mmd_o < 1e-9 and rep.mmd_r < 1e-9

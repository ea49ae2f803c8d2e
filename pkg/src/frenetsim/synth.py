"""Procedural maps, trajectories, datasets, and labeled behavior fixtures.

Training data is generated collision-free by construction: agents are
spread across lanes, same-lane followers are slower than their leader,
and lane changes are only granted when the target lane is clear. Every
track spans 11 history + 80 future steps at dt = 0.1 s with t_now = 10.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import frenet
from .scene import (
    DT,
    LANE_WIDTH,
    AgentTrack,
    LaneGraph,
    MapPolyline,
    Scenario,
    scenario_from_dict,
    scenario_to_dict,
)

T_HIST = 11
T_FUT = 80
T_WINDOW = T_HIST + T_FUT
T_NOW = T_HIST - 1

MAX_ACCEL = 3.0
MIN_GAP = 5.0


# ---------------------------------------------------------------------------
# maps


def _sample_line(p0, p1, spacing=10.0):
    n = max(2, int(np.hypot(*(np.subtract(p1, p0))) / spacing) + 1)
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) * np.asarray(p0, float) + t * np.asarray(p1, float)


def gen_map(spec: dict, seed: int = 0):
    """Build (polylines, LaneGraph) for kind straight | curve | merge.

    Lane ids increase to the right of travel; adjacent lanes get neighbor
    edges, merge segments get successor edges.
    """
    kind = spec.get("kind")
    lanes = int(spec.get("lanes", 3))
    length = float(spec.get("length", 400.0))
    width = float(spec.get("width", LANE_WIDTH))
    if lanes < 1:
        raise ValueError("lanes must be >= 1")
    if length <= 0:
        raise ValueError("length must be positive")

    polys, edges = [], []
    if kind == "straight":
        for i in range(lanes):
            pts = _sample_line([0.0, -i * width], [length, -i * width])
            polys.append(MapPolyline(i, pts, "driving", width))
            if i > 0:
                edges.append((i - 1, i, "right_neighbor"))
    elif kind == "curve":
        radius = float(spec.get("radius", 120.0))
        if radius <= lanes * width:
            raise ValueError("radius too small for lane count")
        span = length / radius  # arc angle of the innermost lane
        n_pts = max(2, int(length / 5.0) + 1)
        ang = np.linspace(0.0, span, n_pts)
        for i in range(lanes):
            r = radius + i * width  # larger radius = further right of travel
            pts = np.column_stack([r * np.sin(ang), radius - r * np.cos(ang)])
            polys.append(MapPolyline(i, pts, "driving", width))
            if i > 0:
                edges.append((i - 1, i, "right_neighbor"))
    elif kind == "merge":
        split = length * 0.5
        for i in range(lanes):
            pre = _sample_line([0.0, -i * width], [split, -i * width])
            post = _sample_line([split, -i * width], [length, -i * width])
            polys.append(MapPolyline(i, pre, "driving", width))
            polys.append(MapPolyline(lanes + i, post, "driving", width))
            edges.append((i, lanes + i, "successor"))
            if i > 0:
                edges.append((i - 1, i, "right_neighbor"))
                edges.append((lanes + i - 1, lanes + i, "right_neighbor"))
        y_start = -(lanes + 1.0) * width
        y_end = -(lanes - 1) * width  # merges into the rightmost lane
        xs = np.linspace(0.0, split, 40)
        ramp = np.column_stack([xs, y_start + (y_end - y_start) * _blend(xs / split)])
        polys.append(MapPolyline(2 * lanes, ramp, "driving", width))
        edges.append((2 * lanes, 2 * lanes - 1, "successor"))
    else:
        raise ValueError(f"unknown map kind {kind!r}")
    return tuple(polys), LaneGraph(tuple(edges))


def _blend(tau):
    """Quintic 0->1 blend with zero first/second derivatives at the ends."""
    tau = np.clip(tau, 0.0, 1.0)
    return 10 * tau**3 - 15 * tau**4 + 6 * tau**5


# ---------------------------------------------------------------------------
# trajectories


def _speed_profile(rng, T=T_WINDOW):
    """Piecewise-constant-accel speed curve bounded to +/-MAX_ACCEL.

    A fraction of profiles brake to (near) standstill partway through the
    window so the corpus covers stopping traffic, not just cruising bands.
    """
    if rng.random() < 0.18:
        u = rng.uniform(5.0, 9.0)
        v_end = rng.uniform(0.0, 0.8)
        t_brake = rng.uniform(0.5, 2.5)
        t = np.arange(T) * DT
        return np.clip(u - 1.5 * np.clip(t - t_brake, 0.0, None), v_end, None)
    u = rng.uniform(5.0, 12.0)
    w = float(np.clip(u + rng.uniform(-3.0, 3.0), 3.0, 14.0))
    accel = float(np.clip((w - u) / 4.0, -1.5, 1.5))
    t = np.arange(T) * DT
    v = u + accel * t
    v = np.clip(v, min(u, w), max(u, w))
    return v


def track_from_profile(path, s_of_t, d_of_t, agent_id=0, extent=(4.8, 2.0)):
    """Realize an (s(t), d(t)) plan as an AgentTrack along a reference path."""
    if np.max(s_of_t) > path.length + 1e-9 or np.min(s_of_t) < -1e-9:
        raise ValueError("map too short for the requested trajectory")
    pts = np.array([frenet.to_cartesian(path, frenet.FrenetCoord(s, d)) for s, d in zip(s_of_t, d_of_t)])
    step = np.diff(pts, axis=0)
    heading = np.empty(len(pts))
    moving = np.hypot(step[:, 0], step[:, 1]) > 1e-9
    h = 0.0
    for i in range(len(step)):
        if moving[i]:
            h = float(np.arctan2(step[i, 1], step[i, 0]))
        heading[i] = h
    heading[-1] = heading[-2]
    return AgentTrack(agent_id, np.column_stack([pts, heading]), extent)


def gen_agents(polylines, graph, n, behavior_mix=None, seed=0, length_margin=20.0):
    """Lane-following agent tracks over the 91-step window.

    behavior_mix maps {"keep": p, "lane_change": q}; lane changes use a
    quintic lateral blend over 3-5 s and are granted only when the target
    lane is free, so the result stays collision-free by construction.
    """
    if n < 1:
        raise ValueError("need at least one agent")
    mix = dict(behavior_mix or {"keep": 0.8, "lane_change": 0.2})
    rng = np.random.default_rng(seed)
    driving = [p for p in polylines if p.lane_type == "driving"]
    paths = {p.id: frenet.build_ref_path(p) for p in driving}
    horizon = (T_WINDOW - 1) * DT

    # round-robin over lanes; same-lane agents are stacked front to back
    lane_ids = sorted(paths)
    per_lane = {lid: [] for lid in lane_ids}
    for k in range(n):
        per_lane[lane_ids[k % len(lane_ids)]].append(k)

    tracks = [None] * n
    occupancy = {lid: [] for lid in lane_ids}  # (s_lo, s_hi) intervals
    for lid in lane_ids:
        path = paths[lid]
        agents_here = per_lane[lid]
        if not agents_here:
            continue
        # followers share the leader's profile shape minus a margin, so
        # every follower is slower than its leader at every step and
        # same-lane gaps never shrink
        v = _speed_profile(rng)
        s_front = path.length - length_margin - 13.0 * (lid % 4)  # stagger lanes
        for k in agents_here:
            travel = np.concatenate([[0.0], np.cumsum(v[:-1] * DT)])
            s0 = s_front - travel[-1]
            if s0 < length_margin:
                raise ValueError("map too short for the requested agent count")
            s_of_t = s0 + travel
            occupancy[lid].append((s0, s_of_t[-1], k))
            s_front = s0 - max(MIN_GAP * 6, 30.0)
            tracks[k] = (lid, s_of_t)
            v = np.clip(v - rng.uniform(0.5, 1.5), 0.5, None)

    out = []
    behaviors = list(mix)
    probs = np.array([mix[b] for b in behaviors], float)
    probs = probs / probs.sum()
    for k in range(n):
        lid, s_of_t = tracks[k]
        path = paths[lid]
        d_of_t = np.zeros(T_WINDOW)
        choice = rng.choice(behaviors, p=probs)
        if choice == "lane_change":
            target = _free_neighbor(graph, occupancy, lid, s_of_t, rng)
            if target is not None:
                duration = rng.uniform(3.0, 5.0)
                t0 = rng.uniform(1.2, horizon - duration - 0.5)
                tau = (np.arange(T_WINDOW) * DT - t0) / duration
                width = next(p.width for p in driving if p.id == lid)
                sign = -1.0 if target > lid else 1.0  # higher id is to the right
                d_of_t = sign * width * _blend(tau)
                occupancy[target].append((s_of_t[0], s_of_t[-1], k))
        out.append(track_from_profile(path, s_of_t, d_of_t, agent_id=k))
    out = tuple(out)
    # construction should guarantee this; verify with the real overlap test
    from . import metrics

    probe = Scenario(tuple(polylines), graph, out, t_now=T_NOW)
    if metrics.agent_collision_flags(probe).any():
        raise AssertionError("generated agents collide; widen spacing")
    return out


def _free_neighbor(graph, occupancy, lid, s_of_t, rng):
    options = []
    for rel in ("left_neighbor", "right_neighbor"):
        for cand in graph.related(lid, rel):
            if cand not in occupancy:
                continue
            lo, hi = s_of_t[0] - 40.0, s_of_t[-1] + 40.0
            if all(b < lo or a > hi for a, b, _ in occupancy[cand]):
                options.append(cand)
    if not options:
        return None
    return options[int(rng.integers(len(options)))]


def make_scenario(map_spec: dict, n_agents: int, seed: int = 0, behavior_mix=None) -> Scenario:
    polylines, graph = gen_map(map_spec, seed)
    agents = gen_agents(polylines, graph, n_agents, behavior_mix, seed)
    return Scenario(polylines, graph, agents, t_now=T_NOW)


# ---------------------------------------------------------------------------
# datasets


def generate_dataset(map_spec: dict, count: int, seed: int = 0, agents=(2, 6)):
    """Deterministic list of scenarios plus a manifest {count, seeds, spec}."""
    rng = np.random.default_rng(seed)
    scenarios, seeds = [], []
    kinds = ["straight", "curve"] if map_spec.get("kind") == "mixed" else [map_spec["kind"]]
    for i in range(count):
        s = int(rng.integers(2**31))
        spec_i = dict(map_spec, kind=kinds[i % len(kinds)])
        n = int(np.random.default_rng(s).integers(agents[0], agents[1] + 1))
        scenarios.append(make_scenario(spec_i, n, seed=s))
        seeds.append(s)
    manifest = {"count": count, "seeds": seeds, "spec": dict(map_spec, agents=list(agents))}
    return scenarios, manifest


def save_dataset(scenarios, manifest, path) -> None:
    """One Scenario JSON per line; manifest lands next to it."""
    path = str(path)
    with open(path, "w") as f:
        for sc in scenarios:
            f.write(json.dumps(scenario_to_dict(sc)) + "\n")
    with open(path + ".manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)


def load_dataset(path):
    path = str(path)
    with open(path) as f:
        scenarios = [scenario_from_dict(json.loads(line)) for line in f if line.strip()]
    try:
        with open(path + ".manifest.json") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        manifest = None
    return scenarios, manifest


# ---------------------------------------------------------------------------
# labeled behavior fixtures


@dataclass(frozen=True)
class LabeledScenario:
    scenario: Scenario
    label: str
    params: dict


FIXTURE_KINDS = ("cut_in", "out_of_road", "yield", "rightmost", "weaving", "reverse")


def _fixture_map(lanes=3, length=300.0):
    return gen_map({"kind": "straight", "lanes": lanes, "length": length})


def _const_speed_s(s0, v):
    return s0 + v * DT * np.arange(T_WINDOW)


def gen_fixture(kind: str, seed: int = 0) -> LabeledScenario:
    """Scenario whose ground-truth future exhibits the named behavior."""
    rng = np.random.default_rng(seed)
    width = LANE_WIDTH
    if kind == "cut_in":
        polys, graph = _fixture_map(lanes=2)
        paths = {p.id: frenet.build_ref_path(p) for p in polys}
        v1 = rng.uniform(7.0, 9.0)
        v0 = v1 + rng.uniform(0.5, 1.5)
        s1 = _const_speed_s(30.0, v1)
        s0 = _const_speed_s(36.0, v0)
        t0 = 2.0 + rng.uniform(0.0, 1.0)
        tau = (np.arange(T_WINDOW) * DT - t0) / 4.0
        d0 = -width * _blend(tau)  # from lane 0 down into lane 1
        a0 = track_from_profile(paths[0], s0, d0, agent_id=0)
        a1 = track_from_profile(paths[1], s1, np.zeros(T_WINDOW), agent_id=1)
        sc = Scenario(polys, graph, (a0, a1), t_now=T_NOW)
        params = {"gap": float(s0[-1] - s1[-1]), "merge_time": t0}
    elif kind == "out_of_road":
        polys, graph = _fixture_map(lanes=2)
        path = frenet.build_ref_path(polys[0])
        v = rng.uniform(6.0, 9.0)
        tau = (np.arange(T_WINDOW) * DT - 1.5) / 3.0
        exit_d = width * 1.3
        d = exit_d * _blend(tau)  # leftward, beyond the road edge
        a0 = track_from_profile(path, _const_speed_s(30.0, v), d, agent_id=0)
        sc = Scenario(polys, graph, (a0,), t_now=T_NOW)
        params = {"exit_d": exit_d}
    elif kind == "yield":
        polys, graph = _fixture_map(lanes=2)
        paths = {p.id: frenet.build_ref_path(p) for p in polys}
        v0 = rng.uniform(5.0, 7.0)
        t = np.arange(T_WINDOW) * DT
        speed0 = np.clip(v0 - 2.5 * np.clip(t - 1.0, 0.0, None), 0.3, None)
        s0 = 40.0 + np.concatenate([[0.0], np.cumsum(speed0[:-1] * DT)])
        s1 = _const_speed_s(18.0, 10.0)
        a0 = track_from_profile(paths[0], s0, np.zeros(T_WINDOW), agent_id=0)
        a1 = track_from_profile(paths[1], s1, np.zeros(T_WINDOW), agent_id=1)
        sc = Scenario(polys, graph, (a0, a1), t_now=T_NOW)
        params = {"v0": v0}
    elif kind == "rightmost":
        polys, graph = _fixture_map(lanes=3)
        path = frenet.build_ref_path(polys[0])
        v = rng.uniform(7.0, 9.0)
        t = np.arange(T_WINDOW) * DT
        d = -width * _blend((t - 1.0) / 3.0) - width * _blend((t - 4.5) / 3.0)
        a0 = track_from_profile(path, _const_speed_s(20.0, v), d, agent_id=0)
        sc = Scenario(polys, graph, (a0,), t_now=T_NOW)
        params = {"final_lane": 2}
    elif kind == "weaving":
        polys, graph = _fixture_map(lanes=2)
        path = frenet.build_ref_path(polys[0])
        amp, omega = 1.5, 0.5
        v = rng.uniform(7.0, 9.0)
        d = amp * np.sin(omega * np.arange(T_WINDOW) * DT)
        a0 = track_from_profile(path, _const_speed_s(25.0, v), d, agent_id=0)
        sc = Scenario(polys, graph, (a0,), t_now=T_NOW)
        params = {"amplitude": amp, "omega": omega}
    elif kind == "reverse":
        polys, graph = _fixture_map(lanes=2)
        path = frenet.build_ref_path(polys[0])
        v = -rng.uniform(3.0, 5.0)
        a0 = track_from_profile(path, _const_speed_s(200.0, v), np.zeros(T_WINDOW), agent_id=0)
        sc = Scenario(polys, graph, (a0,), t_now=T_NOW)
        params = {"v": v}
    else:
        raise ValueError(f"unknown fixture kind {kind!r}")
    return LabeledScenario(sc, kind, params)

"""Evaluation metrics: ADE/FDE, JSD bundle, collision/off-road rates, MMD.

Histogram bins are fixed (see _JSD_BINS) so reported numbers are
reproducible; out-of-range samples clip into the edge bins. Collision
uses a separating-axis test on oriented rectangles where touching counts
as separated, so the overlap verdict flips exactly at contact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import frenet
from .scene import wrap_angle

_JSD_BINS = {
    "speed": (0.0, 30.0, 30),
    "angular_speed": (-1.0, 1.0, 40),
    "accel": (-8.0, 8.0, 40),
    "nearest_dist": (0.0, 50.0, 50),
}


@dataclass(frozen=True)
class MetricReport:
    ade: float
    fde: float
    jsd: float
    collision_rate: float
    offroad_rate: float
    scr: float
    mmd_o: float
    mmd_r: float

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        for name in ("collision_rate", "offroad_rate", "scr"):
            if getattr(self, name) > 1:
                raise ValueError(f"{name} is a fraction, got {getattr(self, name)}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @staticmethod
    def from_json(text: str) -> "MetricReport":
        # annotation keys (e.g. a config hash stamped by a writer) are ignored
        names = {f.name for f in fields(MetricReport)}
        return MetricReport(**{k: v for k, v in json.loads(text).items() if k in names})


# ---------------------------------------------------------------------------
# displacement errors


def ade_fde(sim, gt):
    """Mean and final Euclidean position error, averaged over agents.

    sim/gt: arrays (A, T, 2) or lists of (T, 2) trajectories.
    """
    sim = [np.asarray(t, float) for t in sim]
    gt = [np.asarray(t, float) for t in gt]
    if len(sim) != len(gt) or any(a.shape != b.shape for a, b in zip(sim, gt)):
        raise ValueError("sim and gt must have matching agent counts and horizons")
    ades, fdes = [], []
    for a, b in zip(sim, gt):
        err = np.hypot(a[:, 0] - b[:, 0], a[:, 1] - b[:, 1])
        ades.append(err.mean())
        fdes.append(err[-1])
    return float(np.mean(ades)), float(np.mean(fdes))


# ---------------------------------------------------------------------------
# JSD bundle


def _heading_series(states, dt):
    return wrap_angle(np.diff(states[:, 2])) / dt


def scene_features(scenarios):
    """Pool speed, angular speed, accel, nearest-vehicle distance samples."""
    feats = {k: [] for k in _JSD_BINS}
    for sc in scenarios:
        positions = [a.states[:, :2] for a in sc.agents]
        for a in sc.agents:
            v = np.diff(a.states[:, :2], axis=0) / sc.dt
            speed = np.hypot(v[:, 0], v[:, 1])
            feats["speed"].append(speed)
            feats["angular_speed"].append(_heading_series(a.states, sc.dt))
            feats["accel"].append(np.diff(speed) / sc.dt)
        if len(sc.agents) >= 2:
            stack = np.stack(positions)  # (A, T, 2)
            diff = stack[:, None, :, :] - stack[None, :, :, :]
            dist = np.hypot(diff[..., 0], diff[..., 1])
            for i in range(len(sc.agents)):
                others = np.delete(dist[i], i, axis=0)
                feats["nearest_dist"].append(others.min(axis=0))
    return {k: (np.concatenate(v) if v else np.array([])) for k, v in feats.items()}


def _histogram(vals, lo, hi, bins):
    clipped = np.clip(vals, lo, hi)  # out-of-range mass lands in edge bins
    h, _ = np.histogram(clipped, bins=bins, range=(lo, hi))
    return h.astype(np.float64) / max(h.sum(), 1)


def js_distance(p, q):
    """Jensen-Shannon distance (sqrt of divergence), base-2 logs."""
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    m = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * np.log2(a[mask] / b[mask])))

    div = 0.5 * kl(p, m) + 0.5 * kl(q, m)
    return float(np.sqrt(max(div, 0.0)))


def jsd_bundle(real_scenes, sim_scenes) -> float:
    """Mean JS distance over the four feature histograms."""
    if not real_scenes or not sim_scenes:
        raise ValueError("need at least one scene per side")
    fr = scene_features(real_scenes)
    fs = scene_features(sim_scenes)
    dists = []
    for key, (lo, hi, bins) in _JSD_BINS.items():
        if fr[key].size == 0 or fs[key].size == 0:
            raise ValueError(f"feature {key!r} has no samples")
        dists.append(js_distance(_histogram(fr[key], lo, hi, bins), _histogram(fs[key], lo, hi, bins)))
    return float(np.mean(dists))


# ---------------------------------------------------------------------------
# collision / off-road


def _rect_corners(x, y, heading, length, width):
    c, s = np.cos(heading), np.sin(heading)
    dx, dy = length / 2.0, width / 2.0
    local = np.array([[dx, dy], [dx, -dy], [-dx, -dy], [-dx, dy]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + [x, y]


def rectangles_overlap(corners_a, corners_b) -> bool:
    """Separating-axis test; touching rectangles count as separated."""
    for corners in (corners_a, corners_b):
        for i in range(2):  # two unique edge normals per rectangle
            edge = corners[i + 1] - corners[i]
            axis = np.array([-edge[1], edge[0]])
            pa = corners_a @ axis
            pb = corners_b @ axis
            if pa.max() <= pb.min() or pb.max() <= pa.min():
                return False
    return True


def agent_collision_flags(scenario) -> np.ndarray:
    """Per-agent flag: oriented box overlaps any other agent at any step."""
    n = len(scenario.agents)
    flags = np.zeros(n, dtype=bool)
    T = min(len(a) for a in scenario.agents)
    corners = [
        [_rect_corners(*a.states[t], *a.extent) for t in range(T)] for a in scenario.agents
    ]
    centers = np.stack([a.states[:T, :2] for a in scenario.agents])
    reach = [np.hypot(*a.extent) / 2.0 for a in scenario.agents]
    for i in range(n):
        for j in range(i + 1, n):
            gap = np.hypot(*(centers[i] - centers[j]).T)
            for t in np.nonzero(gap <= reach[i] + reach[j])[0]:
                if rectangles_overlap(corners[i][t], corners[j][t]):
                    flags[i] = flags[j] = True
                    break
    return flags


def agent_offroad_flags(scenario) -> np.ndarray:
    """Per-agent flag: center leaves every driving-lane corridor at any step."""
    lanes = scenario.driving_lanes()
    paths = [(frenet.build_ref_path(p), p.width) for p in lanes]
    flags = np.zeros(len(scenario.agents), dtype=bool)
    for k, a in enumerate(scenario.agents):
        inside = np.zeros(len(a), dtype=bool)
        for path, width in paths:
            proj = frenet.project_trajectory(path, a.states[:, :2])
            inside |= np.abs(proj.d) <= width / 2.0
        flags[k] = bool(np.any(~inside))
    return flags


def collision_offroad(scenario):
    """(collision_rate, offroad_rate, scr) for one scenario."""
    col = agent_collision_flags(scenario)
    off = agent_offroad_flags(scenario)
    return float(col.mean()), float(off.mean()), float(col.any())


def aggregate_collision_offroad(scenarios):
    """Rates over all agents of all scenes; SCR over scenes."""
    col, off, scr = [], [], []
    for sc in scenarios:
        c = agent_collision_flags(sc)
        o = agent_offroad_flags(sc)
        col.append(c)
        off.append(o)
        scr.append(c.any())
    return (
        float(np.concatenate(col).mean()),
        float(np.concatenate(off).mean()),
        float(np.mean(scr)),
    )


# ---------------------------------------------------------------------------
# MMD


def mmd(features_real, features_sim) -> float:
    """Unbiased MMD^2 with a Gaussian kernel, median-heuristic bandwidth.

    Returns max(0, estimate); degenerate pooled samples (zero median
    distance) give 0.
    """
    X = np.atleast_2d(np.asarray(features_real, float))
    Y = np.atleast_2d(np.asarray(features_sim, float))
    if X.shape[0] == 1:
        X = X.T
    if Y.shape[0] == 1:
        Y = Y.T
    m, n = len(X), len(Y)
    if m < 2 or n < 2:
        raise ValueError("need >= 2 samples per side")
    Z = np.concatenate([X, Y])
    d2 = np.sum((Z[:, None, :] - Z[None, :, :]) ** 2, axis=2)
    tri = d2[np.triu_indices(len(Z), k=1)]
    sigma = float(np.median(np.sqrt(tri)))
    if sigma == 0.0:
        return 0.0
    K = np.exp(-d2 / (2.0 * sigma**2))
    Kxx = K[:m, :m]
    Kyy = K[m:, m:]
    Kxy = K[:m, m:]
    sum_xx = (Kxx.sum() - np.trace(Kxx)) / (m * (m - 1))
    sum_yy = (Kyy.sum() - np.trace(Kyy)) / (n * (n - 1))
    value = sum_xx + sum_yy - 2.0 * Kxy.mean()
    return float(max(0.0, value))


def nearest_object_distances(scenarios) -> np.ndarray:
    """Per agent per scene: time-min distance to the nearest other agent."""
    out = []
    for sc in scenarios:
        if len(sc.agents) < 2:
            continue
        stack = np.stack([a.states[:, :2] for a in sc.agents])
        diff = stack[:, None, :, :] - stack[None, :, :, :]
        dist = np.hypot(diff[..., 0], diff[..., 1])
        for i in range(len(sc.agents)):
            others = np.delete(dist[i], i, axis=0)
            out.append(others.min())
    return np.asarray(out)


def road_edge_distances(scenarios) -> np.ndarray:
    """Per agent per scene: time-min signed distance to the nearest corridor
    edge (positive inside the road, negative outside)."""
    out = []
    for sc in scenarios:
        paths = [(frenet.build_ref_path(p), p.width) for p in sc.driving_lanes()]
        for a in sc.agents:
            margins = []
            for path, width in paths:
                proj = frenet.project_trajectory(path, a.states[:, :2])
                margins.append(width / 2.0 - np.abs(proj.d))
            out.append(np.max(margins, axis=0).min())
    return np.asarray(out)


def evaluate_scenarios(real, sim) -> MetricReport:
    """Full report; real/sim are index-paired scenario lists."""
    ades, fdes = [], []
    for r, s in zip(real, sim):
        t0 = r.t_now + 1
        ade, fde = ade_fde(
            [a.states[t0:, :2] for a in s.agents], [a.states[t0:, :2] for a in r.agents]
        )
        ades.append(ade)
        fdes.append(fde)
    col, off, scr = aggregate_collision_offroad(sim)
    no_r = nearest_object_distances(real)
    no_s = nearest_object_distances(sim)
    mmd_o = mmd(no_r, no_s) if len(no_r) >= 2 and len(no_s) >= 2 else 0.0
    mmd_r = mmd(road_edge_distances(real), road_edge_distances(sim))
    return MetricReport(
        ade=float(np.mean(ades)),
        fde=float(np.mean(fdes)),
        jsd=jsd_bundle(real, sim),
        collision_rate=col,
        offroad_rate=off,
        scr=scr,
        mmd_o=mmd_o,
        mmd_r=mmd_r,
    )

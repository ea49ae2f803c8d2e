"""Scenario data model: lane polylines, connectivity, agent tracks.

All types are immutable after construction (frozen dataclasses holding
read-only numpy arrays), so scenarios can be shared freely. Headings are
wrapped to (-pi, pi] at construction everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

LANE_WIDTH = 3.7
VEHICLE_LENGTH = 4.8
VEHICLE_WIDTH = 2.0
DT = 0.1

LANE_TYPES = ("driving", "shoulder", "edge")
RELATIONS = ("predecessor", "successor", "left_neighbor", "right_neighbor")

_MIRROR = {
    "left_neighbor": "right_neighbor",
    "right_neighbor": "left_neighbor",
    "predecessor": "successor",
    "successor": "predecessor",
}


def wrap_angle(theta):
    """Wrap angle(s) to (-pi, pi]."""
    r = np.mod(np.asarray(theta, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    r = np.where(r == -np.pi, np.pi, r)
    return float(r) if np.ndim(theta) == 0 else r


def _frozen_array(a, shape_tail):
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != len(shape_tail) + 1 or arr.shape[1:] != shape_tail:
        raise ValueError(f"expected array of shape (N, {shape_tail}), got {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class MapPolyline:
    """One lane centerline or road boundary, sampled as a 2-D polyline."""

    id: int
    points: np.ndarray  # (P, 2) meters, read-only
    lane_type: str = "driving"
    width: float = LANE_WIDTH

    def __post_init__(self):
        object.__setattr__(self, "points", _frozen_array(self.points, (2,)))
        if len(self.points) < 2:
            raise ValueError(f"polyline {self.id} needs >= 2 points")
        steps = np.diff(self.points, axis=0)
        if np.any(np.all(steps == 0.0, axis=1)):
            raise ValueError(f"polyline {self.id} has duplicate consecutive points")
        if self.lane_type not in LANE_TYPES:
            raise ValueError(f"unknown lane_type {self.lane_type!r}")
        if not self.width > 0:
            raise ValueError(f"polyline {self.id} width must be positive")


@dataclass(frozen=True)
class LaneGraph:
    """Directed lane connectivity; neighbor edges are kept symmetric."""

    edges: tuple = ()
    _adj: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        seen = set()
        for src, dst, rel in self.edges:
            if rel not in RELATIONS:
                raise ValueError(f"unknown relation {rel!r}")
            seen.add((int(src), int(dst), rel))
        # neighbor symmetry holds by construction: add missing mirrors
        for src, dst, rel in list(seen):
            if rel in ("left_neighbor", "right_neighbor"):
                seen.add((dst, src, _MIRROR[rel]))
        edges = tuple(sorted(seen))
        adj = {rel: {} for rel in RELATIONS}
        for src, dst, rel in edges:
            adj[rel].setdefault(src, []).append(dst)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "_adj", adj)

    def related(self, lane_id: int, relation: str) -> list:
        return list(self._adj[relation].get(lane_id, []))


@dataclass(frozen=True)
class AgentState:
    """Pose (x, y, heading) at one timestep."""

    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))


@dataclass(frozen=True)
class AgentTrack:
    """One agent's pose sequence at dt = 0.1 s plus its bounding-box extent."""

    agent_id: int
    states: np.ndarray  # (T, 3) of x, y, heading, read-only
    extent: tuple = (VEHICLE_LENGTH, VEHICLE_WIDTH)

    def __post_init__(self):
        arr = np.array(self.states, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError(f"states must be (T, 3), got {arr.shape}")
        arr[:, 2] = wrap_angle(arr[:, 2])
        arr.flags.writeable = False
        object.__setattr__(self, "states", arr)
        object.__setattr__(self, "extent", (float(self.extent[0]), float(self.extent[1])))
        if not (self.extent[0] > 0 and self.extent[1] > 0):
            raise ValueError("extent must be positive")

    def __len__(self):
        return len(self.states)

    def state_at(self, t: int) -> AgentState:
        x, y, h = self.states[t]
        return AgentState(x, y, h)


@dataclass(frozen=True)
class Scenario:
    """Map polylines + lane graph + agent tracks, with t_now splitting history from future."""

    polylines: tuple
    graph: LaneGraph
    agents: tuple
    t_now: int
    dt: float = DT

    def __post_init__(self):
        object.__setattr__(self, "polylines", tuple(self.polylines))
        object.__setattr__(self, "agents", tuple(self.agents))
        if len(self.agents) < 1:
            raise ValueError("scenario needs at least one agent")
        ids = {p.id for p in self.polylines}
        if len(ids) != len(self.polylines):
            raise ValueError("duplicate polyline ids")
        for src, dst, _ in self.graph.edges:
            if src not in ids or dst not in ids:
                raise ValueError(f"graph edge refers to unknown lane id {src} or {dst}")
        for a in self.agents:
            if not (0 <= self.t_now < len(a)):
                raise ValueError(f"t_now={self.t_now} outside track of length {len(a)}")

    def polyline_by_id(self, lane_id: int) -> MapPolyline:
        for p in self.polylines:
            if p.id == lane_id:
                return p
        raise KeyError(f"unknown lane id {lane_id}")

    def driving_lanes(self) -> list:
        return [p for p in self.polylines if p.lane_type == "driving"]


@dataclass(frozen=True)
class RelFeature:
    """Pose j expressed in pose i's frame: offset plus heading delta as cos/sin."""

    dx: float
    dy: float
    cos_dh: float
    sin_dh: float


def relative_feature(pose_i: AgentState, pose_j: AgentState) -> RelFeature:
    """Express pose_j in pose_i's local frame."""
    ox = pose_j.x - pose_i.x
    oy = pose_j.y - pose_i.y
    c, s = np.cos(pose_i.heading), np.sin(pose_i.heading)
    dh = wrap_angle(pose_j.heading - pose_i.heading)
    return RelFeature(
        dx=float(c * ox + s * oy),
        dy=float(-s * ox + c * oy),
        cos_dh=float(np.cos(dh)),
        sin_dh=float(np.sin(dh)),
    )


def transform_points(points: np.ndarray, anchor: AgentState) -> np.ndarray:
    """Rigidly map global points into the anchor's frame (anchor -> origin, heading 0)."""
    c, s = np.cos(anchor.heading), np.sin(anchor.heading)
    rot = np.array([[c, s], [-s, c]])
    return (np.asarray(points, dtype=np.float64) - [anchor.x, anchor.y]) @ rot.T


def inverse_transform_points(points: np.ndarray, anchor: AgentState) -> np.ndarray:
    """Map points from the anchor's frame back to global coordinates."""
    c, s = np.cos(anchor.heading), np.sin(anchor.heading)
    rot = np.array([[c, -s], [s, c]])
    return np.asarray(points, dtype=np.float64) @ rot.T + [anchor.x, anchor.y]


def normalize_to_frame(scenario: Scenario, anchor: AgentState) -> Scenario:
    """Rigidly transform the whole scenario so anchor sits at the origin with zero heading."""
    polylines = tuple(
        MapPolyline(p.id, transform_points(p.points, anchor), p.lane_type, p.width)
        for p in scenario.polylines
    )
    agents = []
    for a in scenario.agents:
        xy = transform_points(a.states[:, :2], anchor)
        h = wrap_angle(a.states[:, 2] - anchor.heading)
        agents.append(AgentTrack(a.agent_id, np.column_stack([xy, h]), a.extent))
    return Scenario(polylines, scenario.graph, tuple(agents), scenario.t_now, scenario.dt)


# ---------------------------------------------------------------------------
# lane queries


@dataclass(frozen=True)
class LaneQuery:
    """One map-exploration request; see lane_query for the supported kinds."""

    kind: str
    agent: int = None
    lane_id: int = None
    depth: int = None


def current_lane(scenario: Scenario, agent_idx: int, t: int = None) -> list:
    """Driving lane with smallest lateral distance to the agent (ties: smallest id).

    Returns [] when the agent is farther than twice the lane width from
    every driving lane.
    """
    from . import frenet

    t = scenario.t_now if t is None else t
    p = scenario.agents[agent_idx].states[t, :2]
    best = None
    for lane in sorted(scenario.driving_lanes(), key=lambda q: q.id):
        coord = frenet.project(frenet.build_ref_path(lane), p)
        dist = abs(coord.d)
        if dist > 2 * lane.width:
            continue
        if best is None or dist < best[0] - 1e-12:
            best = (dist, lane.id)
    return [] if best is None else [best[1]]


def _follow_to_fixed_point(graph: LaneGraph, lane_id: int, relation: str) -> int:
    seen = {lane_id}
    cur = lane_id
    while True:
        nxt = sorted(graph.related(cur, relation))
        if not nxt or nxt[0] in seen:
            return cur
        cur = nxt[0]
        seen.add(cur)


def lane_query(scenario: Scenario, query: LaneQuery) -> list:
    """Run one map-exploration query; every kind returns a list of lane ids."""
    kind = query.kind
    if kind == "current_lane":
        return current_lane(scenario, query.agent)
    if query.lane_id is not None:
        scenario.polyline_by_id(query.lane_id)  # raises on unknown id
    if kind == "left_lane":
        return sorted(scenario.graph.related(query.lane_id, "left_neighbor"))
    if kind == "right_lane":
        return sorted(scenario.graph.related(query.lane_id, "right_neighbor"))
    if kind == "rightmost_lane":
        return [_follow_to_fixed_point(scenario.graph, query.lane_id, "right_neighbor")]
    if kind == "leftmost_lane":
        return [_follow_to_fixed_point(scenario.graph, query.lane_id, "left_neighbor")]
    if kind == "successor_chain":
        chain = [query.lane_id]
        cur = query.lane_id
        for _ in range(query.depth):
            nxt = sorted(scenario.graph.related(cur, "successor"))
            if not nxt:
                break
            cur = nxt[0]  # deterministic: smallest id branch
            chain.append(cur)
        return chain
    raise ValueError(f"unknown lane query kind {kind!r}")


# ---------------------------------------------------------------------------
# JSON serialization


def scenario_to_dict(scenario: Scenario) -> dict:
    return {
        "polylines": [
            {
                "id": p.id,
                "points": [[float(x), float(y)] for x, y in p.points],
                "lane_type": p.lane_type,
                "width": float(p.width),
            }
            for p in scenario.polylines
        ],
        "edges": [[int(s), int(d), r] for s, d, r in scenario.graph.edges],
        "agents": [
            {
                "agent_id": a.agent_id,
                "extent": [float(a.extent[0]), float(a.extent[1])],
                "states": [[float(x), float(y), float(h)] for x, y, h in a.states],
            }
            for a in scenario.agents
        ],
        "t_now": int(scenario.t_now),
        "dt": float(scenario.dt),
    }


def scenario_from_dict(obj: dict) -> Scenario:
    polylines = tuple(
        MapPolyline(int(p["id"]), np.array(p["points"]), p["lane_type"], float(p["width"]))
        for p in obj["polylines"]
    )
    graph = LaneGraph(tuple((int(s), int(d), r) for s, d, r in obj["edges"]))
    agents = tuple(
        AgentTrack(int(a["agent_id"]), np.array(a["states"]), tuple(a["extent"]))
        for a in obj["agents"]
    )
    return Scenario(polylines, graph, agents, int(obj["t_now"]), float(obj["dt"]))


def save_scenario(scenario: Scenario, path) -> None:
    with open(path, "w") as f:
        json.dump(scenario_to_dict(scenario), f)


def load_scenario(path) -> Scenario:
    with open(path) as f:
        return scenario_from_dict(json.load(f))

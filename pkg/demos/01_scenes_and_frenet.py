# coding: utf-8

# # Scenes, lane graphs, and Frenet coordinates
#
# A scenario bundles a polyline map, a lane connectivity graph, and a set of
# agent tracks sampled at 10 Hz. This walkthrough builds a synthetic scene
# and shows the two coordinate systems everything else is written in:
# world xy and path-relative Frenet (s along the lane, d across it).

import numpy as np

from frenetsim import frenet, synth
from frenetsim.scene import LaneQuery, lane_query

# ## A synthetic three-lane scene
#
# `make_scenario` lays out the requested map, drops agents onto lanes with
# safe spacing, and rolls each one forward for the full 9.1 s window
# (11 history steps + 80 future steps at dt = 0.1 s).

sc = synth.make_scenario({"kind": "curve", "lanes": 3, "radius": 120.0}, n_agents=3, seed=4)
print("lanes:", [p.id for p in sc.polylines])
print("agents:", [a.agent_id for a in sc.agents])
print("window length:", len(sc.agents[0].states), "steps; t_now =", sc.t_now)

# Each track is a (T, 3) array of x, y, heading. The state at the decision
# time t_now is what conditioning and lane association work from.

a0 = sc.agents[0]
print("a0 at t_now:", np.round(a0.states[sc.t_now], 2))

# ## Frenet projection and its inverse
#
# `build_ref_path` turns a lane centerline into a reference path with
# cumulative arc length; `project` maps a world point to (s, d) and
# `to_cartesian` maps back. Round-tripping is exact on straight lanes and
# tight on curved ones, which is what lets cost functions reason in lane
# coordinates without losing geometric fidelity.

path = frenet.build_ref_path(sc.polylines[0])
p = a0.states[sc.t_now, :2]
coord = frenet.project(path, p)
print(f"a0 in lane-0 coordinates: s = {coord.s:.2f} m, d = {coord.d:.2f} m")

back = frenet.to_cartesian(path, coord)
print("round-trip error:", np.linalg.norm(back - p))

# The sign convention: d > 0 is left of the path direction, d < 0 right.

left = frenet.to_cartesian(path, frenet.FrenetCoord(coord.s, coord.d + 1.0))
right = frenet.to_cartesian(path, frenet.FrenetCoord(coord.s, coord.d - 1.0))
print("one meter left :", np.round(left, 2))
print("one meter right:", np.round(right, 2))

# ## Lane queries
#
# The same queries the cost DSL exposes — current lane, neighbors, the
# rightmost reachable lane — are plain functions over the scenario.

here = lane_query(sc, LaneQuery("current_lane", agent=0))
rightmost = lane_query(sc, LaneQuery("rightmost_lane", lane_id=here[0]))
print("a0 current lane:", here, "| rightmost from there:", rightmost)

for pl in sc.polylines:
    print(
        f"lane {pl.id}: left={sc.graph.related(pl.id, 'left_neighbor')}"
        f" right={sc.graph.related(pl.id, 'right_neighbor')}"
        f" successors={sc.graph.related(pl.id, 'successor')}"
    )

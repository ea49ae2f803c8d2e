"""Arc-length reference paths and (s, d) Frenet projection.

Projection onto a piecewise-linear path is only piecewise smooth, so the
on-tape variant freezes the segment assignment and endpoint-clamp state
per evaluation; within a region of constant assignment both s and d are
linear in the query point, which keeps guidance gradients well-defined.

Sign convention: d is positive on the left of the local tangent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad as G


@dataclass(frozen=True)
class RefPath:
    """Polyline with per-vertex cumulative arc length and per-segment unit tangents."""

    vertices: np.ndarray  # (V, 2)
    cum_s: np.ndarray  # (V,), cum_s[0] = 0, strictly increasing
    seg_dir: np.ndarray  # (V-1, 2) unit tangents
    seg_len: np.ndarray  # (V-1,)
    seg_normal: np.ndarray  # (V-1, 2) left normals

    @property
    def length(self) -> float:
        return float(self.cum_s[-1])


@dataclass(frozen=True)
class FrenetCoord:
    s: float
    d: float


def build_ref_path(polyline) -> RefPath:
    """Parameterize a polyline (or raw (V,2) array) by arc length."""
    pts = polyline.points if hasattr(polyline, "points") else polyline
    verts = np.array(pts, dtype=np.float64)
    if verts.ndim != 2 or verts.shape[1] != 2 or len(verts) < 2:
        raise ValueError(f"reference path needs (V>=2, 2) points, got {verts.shape}")
    steps = np.diff(verts, axis=0)
    lens = np.hypot(steps[:, 0], steps[:, 1])
    if np.any(lens == 0.0):
        raise ValueError("reference path has duplicate consecutive points")
    dirs = steps / lens[:, None]
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    normals = np.column_stack([-dirs[:, 1], dirs[:, 0]])
    for a in (verts, cum, dirs, lens, normals):
        a.flags.writeable = False
    return RefPath(verts, cum, dirs, lens, normals)


def _project_many(path: RefPath, pts: np.ndarray):
    """Vectorized nearest-segment projection of (T,2) points.

    Returns (s, d, seg index, clamped flag); equidistant segments resolve
    to the smallest index.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    rel = pts[:, None, :] - path.vertices[None, :-1, :]  # (T, S, 2)
    u = np.einsum("tsk,sk->ts", rel, path.seg_dir)
    t = np.clip(u, 0.0, path.seg_len[None, :])
    closest = path.vertices[None, :-1, :] + t[:, :, None] * path.seg_dir[None, :, :]
    dist2 = np.sum((pts[:, None, :] - closest) ** 2, axis=2)
    seg = np.argmin(dist2, axis=1)  # first index on ties
    rows = np.arange(len(pts))
    u_sel = u[rows, seg]
    clamped = (u_sel < 0.0) | (u_sel > path.seg_len[seg])
    s = path.cum_s[seg] + t[rows, seg]
    d = np.einsum("tk,tk->t", rel[rows, seg], path.seg_normal[seg])
    return s, d, seg, clamped


def project(path: RefPath, p) -> FrenetCoord:
    """Project one point; s clamps at the path ends, d keeps its sign."""
    s, d, _, _ = _project_many(path, np.asarray(p, dtype=np.float64)[None, :])
    return FrenetCoord(float(s[0]), float(d[0]))


def to_cartesian(path: RefPath, coord: FrenetCoord):
    """Inverse map: point at arc length s, offset d along the left normal."""
    s, d = float(coord.s), float(coord.d)
    if s < -1e-9 or s > path.length + 1e-9:
        raise ValueError(f"s={s} outside [0, {path.length}]")
    s = min(max(s, 0.0), path.length)
    i = int(np.clip(np.searchsorted(path.cum_s, s, side="right") - 1, 0, len(path.seg_len) - 1))
    base = path.vertices[i] + (s - path.cum_s[i]) * path.seg_dir[i]
    p = base + d * path.seg_normal[i]
    return float(p[0]), float(p[1])


@dataclass(frozen=True)
class ProjectedTrajectory:
    """Per-timestep Frenet coordinates with the frozen assignment that produced them."""

    s: np.ndarray
    d: np.ndarray
    seg: np.ndarray
    clamped: np.ndarray


def project_trajectory(path: RefPath, traj: np.ndarray) -> ProjectedTrajectory:
    """Project a (T,2) trajectory; the segment index per step is recorded
    so downstream gradients can treat the assignment as constant."""
    s, d, seg, clamped = _project_many(path, traj)
    return ProjectedTrajectory(s, d, seg, clamped)


def frenet_on_tape(path: RefPath, xy: G.Tensor):
    """Differentiable (s, d) of a (T,2) position Tensor.

    The segment assignment and clamp state are frozen from the current
    values; within that assignment d = (p - A).n and s = cum_s + (p - A).dir
    are linear in p (clamped steps hold s constant).
    """
    _, _, seg, clamped = _project_many(path, xy.data)
    anchors = path.vertices[seg]  # constants under the frozen assignment
    dirs = path.seg_dir[seg]
    normals = path.seg_normal[seg]
    rel = G.sub(xy, anchors)
    d = G.tsum(G.mul(rel, normals), axis=1)
    u = G.tsum(G.mul(rel, dirs), axis=1)
    free = (~clamped).astype(np.float64)
    u_frozen = np.clip(
        np.einsum("tk,tk->t", xy.data - anchors, dirs), 0.0, path.seg_len[seg]
    )
    s = G.add(G.mul(u, free), path.cum_s[seg] + (1.0 - free) * u_frozen)
    return s, d

"""Deterministic SVG pictures of scenarios.

Lanes draw as rounded corridors at their true width with a dashed
centerline, each agent's trajectory as a fading polyline (old states
faint, recent states solid), and each agent's current pose as a rotated
bounding box with a nose tick. Output is plain SVG 1.1 with no external
references, no timestamps, and fixed-precision coordinates, so the same
scenario always renders to the same bytes.
"""

from __future__ import annotations

import numpy as np

from .scene import Scenario

PALETTE = (
    "#1f77b4",
    "#d62728",
    "#2ca02c",
    "#9467bd",
    "#ff7f0e",
    "#17becf",
    "#8c564b",
    "#e377c2",
)
LANE_FILL = {"driving": "#d6dae1", "shoulder": "#e6e2d4", "bike": "#d9e6d4"}
FADE_MIN, FADE_MAX = 0.12, 0.9


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def render_scenario(
    scenario: Scenario, path=None, px_width: float = 900.0, margin: float = 8.0,
    comment: str = None,
) -> str:
    """Render to an SVG string; also write it to `path` when given."""
    pts = [lane.points for lane in scenario.polylines]
    pts += [tr.states[:, :2] for tr in scenario.agents]
    allp = np.vstack(pts)
    xmin, ymin = allp.min(axis=0) - margin
    xmax, ymax = allp.max(axis=0) + margin
    scale = px_width / (xmax - xmin)
    px_height = (ymax - ymin) * scale

    def X(x):
        return (x - xmin) * scale

    def Y(y):
        return (ymax - y) * scale  # flip: SVG y grows downward

    out = [
        '<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{_fmt(px_width)}" height="{_fmt(px_height)}" '
        f'viewBox="0 0 {_fmt(px_width)} {_fmt(px_height)}">'
    ]
    if comment:
        out.append(f"<!-- {comment.replace('--', '- -')} -->")
    out.append(f'<rect width="{_fmt(px_width)}" height="{_fmt(px_height)}" fill="#f7f8f9"/>')

    for lane in scenario.polylines:
        path_pts = " ".join(f"{_fmt(X(x))},{_fmt(Y(y))}" for x, y in lane.points)
        fill = LANE_FILL.get(lane.lane_type, "#e0e0e0")
        out.append(
            f'<polyline points="{path_pts}" fill="none" stroke="{fill}" '
            f'stroke-width="{_fmt(lane.width * scale)}" '
            'stroke-linecap="round" stroke-linejoin="round"/>'
        )
        out.append(
            f'<polyline points="{path_pts}" fill="none" stroke="#ffffff" '
            f'stroke-width="{_fmt(0.15 * scale)}" stroke-dasharray='
            f'"{_fmt(1.5 * scale)} {_fmt(2.5 * scale)}"/>'
        )

    for idx, tr in enumerate(scenario.agents):
        color = PALETTE[idx % len(PALETTE)]
        xy = tr.states[:, :2]
        n_seg = len(xy) - 1
        out.append(f'<g stroke="{color}" fill="none" stroke-width="{_fmt(0.35 * scale)}">')
        for t in range(n_seg):
            alpha = FADE_MIN + (FADE_MAX - FADE_MIN) * (t / max(n_seg - 1, 1))
            out.append(
                f'<line x1="{_fmt(X(xy[t, 0]))}" y1="{_fmt(Y(xy[t, 1]))}" '
                f'x2="{_fmt(X(xy[t + 1, 0]))}" y2="{_fmt(Y(xy[t + 1, 1]))}" '
                f'stroke-opacity="{alpha:.3f}"/>'
            )
        out.append("</g>")

    for idx, tr in enumerate(scenario.agents):
        color = PALETTE[idx % len(PALETTE)]
        x, y, heading = tr.states[scenario.t_now]
        length, width = tr.extent
        deg = -np.degrees(heading)  # y-flip mirrors rotation sense
        half_l, half_w = length * scale / 2, width * scale / 2
        out.append(
            f'<g transform="translate({_fmt(X(x))} {_fmt(Y(y))}) rotate({_fmt(deg)})">'
            f'<rect x="{_fmt(-half_l)}" y="{_fmt(-half_w)}" '
            f'width="{_fmt(length * scale)}" height="{_fmt(width * scale)}" '
            f'rx="{_fmt(0.3 * scale)}" fill="{color}" fill-opacity="0.85" '
            f'stroke="#30343a" stroke-width="{_fmt(0.08 * scale)}"/>'
            f'<line x1="0" y1="0" x2="{_fmt(half_l)}" y2="0" '
            f'stroke="#ffffff" stroke-width="{_fmt(0.12 * scale)}"/>'
            "</g>"
        )
        out.append(
            f'<text x="{_fmt(X(x))}" y="{_fmt(Y(y) - half_w - 4)}" '
            f'font-family="sans-serif" font-size="{_fmt(12.0)}" '
            f'fill="{color}" text-anchor="middle">a{idx}</text>'
        )

    out.append("</svg>")
    svg = "\n".join(out)
    if path is not None:
        with open(path, "w") as f:
            f.write(svg)
    return svg

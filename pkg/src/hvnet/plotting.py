"""Minimal deterministic SVG rendering of a BEV scene.

Orientation: forward (+x) points up, left (+y) points left, as seen from above.
"""

from __future__ import annotations

import numpy as np

from .pointcloud_io import CLASS_NAMES, SceneSpec
from .rotbox import bev_of, corners_bev

PX_PER_M = 10.0
MAX_POINTS = 20000
GT_COLOR = "#1a9850"
DET_COLOR = "#d73027"


def _xy_to_svg(xy: np.ndarray, scene: SceneSpec) -> np.ndarray:
    u = (scene.max[1] - xy[..., 1]) * PX_PER_M
    v = (scene.max[0] - xy[..., 0]) * PX_PER_M
    return np.stack([u, v], axis=-1)


def _fmt(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


def render_bev_svg(scene: SceneSpec, points: np.ndarray, gt_boxes=None, gt_labels=None,
                   det_boxes=None, det_labels=None, det_scores=None) -> str:
    """Return SVG text; identical inputs always give identical bytes."""
    width, height = scene.W * PX_PER_M, scene.L * PX_PER_M
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(width)}" '
           f'height="{_fmt(height)}" viewBox="0 0 {_fmt(width)} {_fmt(height)}">',
           f'<rect x="0" y="0" width="{_fmt(width)}" height="{_fmt(height)}" fill="#ffffff"/>']
    pts = np.asarray(points, dtype=float)
    if len(pts) > MAX_POINTS:
        pts = pts[:: -(-len(pts) // MAX_POINTS)]
    out.append('<g fill="#555555">')
    for u, v in _xy_to_svg(pts[:, :2], scene):
        out.append(f'<circle cx="{_fmt(u)}" cy="{_fmt(v)}" r="0.8"/>')
    out.append("</g>")

    def boxes(group, color, boxes3d, labels, scores):
        if boxes3d is None or len(boxes3d) == 0:
            return
        out.append(f'<g id="{group}" fill="none" stroke="{color}" stroke-width="1.5">')
        corners = corners_bev(bev_of(np.asarray(boxes3d, dtype=float).reshape(-1, 7)))
        for i, c in enumerate(corners):
            path = " ".join(f"{_fmt(u)},{_fmt(v)}" for u, v in _xy_to_svg(c, scene))
            name = CLASS_NAMES[int(labels[i])] if labels is not None else ""
            title = name if scores is None else f"{name} {float(scores[i]):.3f}"
            out.append(f'<polygon points="{path}"><title>{title}</title></polygon>')
        out.append("</g>")

    boxes("ground-truth", GT_COLOR, gt_boxes, gt_labels, None)
    boxes("detections", DET_COLOR, det_boxes, det_labels, det_scores)
    out.append("</svg>")
    return "\n".join(out) + "\n"

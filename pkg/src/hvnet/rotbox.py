"""Oriented bird's-eye-view box geometry.

A BEV box is a length-5 array ``(x, y, l, w, yaw)``; a 3D box is a length-7
array ``(x, y, z, l, w, h, yaw)`` with ``z`` the vertical center. Boxes are
kept canonical: ``yaw`` in ``[0, pi)`` and ``l >= w`` (a rectangle is the same
set under ``(l, w, yaw) -> (w, l, yaw + pi/2)``, so one representative is
picked). Squares additionally fold ``yaw`` into ``[0, pi/2)``.
"""

from __future__ import annotations

import numpy as np

EDGE_TOL = 1e-9
SQUARE_TOL = 1e-9


class GeometryError(ValueError):
    """Raised for degenerate or self-intersecting boxes."""


def canonical_bev(boxes: np.ndarray) -> np.ndarray:
    """Return the canonical representation of ``(..., 5)`` BEV boxes."""
    b = np.array(boxes, dtype=float, copy=True)
    swap = b[..., 3] > b[..., 2] + SQUARE_TOL
    l = np.where(swap, b[..., 3], b[..., 2])
    w = np.where(swap, b[..., 2], b[..., 3])
    yaw = b[..., 4] + np.where(swap, np.pi / 2, 0.0)
    square = np.abs(l - w) <= SQUARE_TOL
    yaw = np.where(square, np.mod(yaw, np.pi / 2), np.mod(yaw, np.pi))
    # mod can return the period itself for tiny negative inputs
    yaw = np.where(yaw >= np.where(square, np.pi / 2, np.pi), 0.0, yaw)
    b[..., 2], b[..., 3], b[..., 4] = l, w, yaw
    return b


def canonical_box3d(boxes: np.ndarray) -> np.ndarray:
    b = np.array(boxes, dtype=float, copy=True)
    bev = canonical_bev(b[..., [0, 1, 3, 4, 6]])
    b[..., 3], b[..., 4], b[..., 6] = bev[..., 2], bev[..., 3], bev[..., 4]
    return b


def bev_of(boxes3d: np.ndarray) -> np.ndarray:
    return np.asarray(boxes3d, dtype=float)[..., [0, 1, 3, 4, 6]]


def corners_bev(boxes: np.ndarray) -> np.ndarray:
    """Counter-clockwise corners, starting from the box-frame ``(+l/2, +w/2)`` corner.

    Accepts ``(5,)`` or ``(N, 5)``; returns ``(4, 2)`` or ``(N, 4, 2)``.
    """
    b = np.asarray(boxes, dtype=float)
    x, y, l, w, yaw = (b[..., i] for i in range(5))
    local = np.array([[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]])
    lx = local[:, 0] * l[..., None]
    ly = local[:, 1] * w[..., None]
    c, s = np.cos(yaw)[..., None], np.sin(yaw)[..., None]
    return np.stack([x[..., None] + c * lx - s * ly, y[..., None] + s * lx + c * ly], axis=-1)


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def clip_convex(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the CCW convex ``clipper``."""
    out = [tuple(p) for p in subject]
    n = len(clipper)
    for k in range(n):
        if not out:
            break
        a, b = clipper[k], clipper[(k + 1) % n]
        scale = max(1.0, float(np.hypot(*(b - a))))
        inp, out = out, []
        for i in range(len(inp)):
            cur, prev = inp[i], inp[i - 1]
            cur_in = _cross(a, b, cur) >= -EDGE_TOL * scale
            prev_in = _cross(a, b, prev) >= -EDGE_TOL * scale
            if cur_in:
                if not prev_in:
                    out.append(_intersect(prev, cur, a, b))
                out.append(cur)
            elif prev_in:
                out.append(_intersect(prev, cur, a, b))
    return np.array(out, dtype=float).reshape(-1, 2)


def _intersect(p, q, a, b):
    dp = (q[0] - p[0], q[1] - p[1])
    da = (b[0] - a[0], b[1] - a[1])
    denom = dp[0] * da[1] - dp[1] * da[0]
    if denom == 0.0:
        return q
    t = ((a[0] - p[0]) * da[1] - (a[1] - p[1]) * da[0]) / denom
    return (p[0] + t * dp[0], p[1] + t * dp[1])


def riou(a: np.ndarray, b: np.ndarray) -> float:
    """Rotated IoU of two BEV boxes via polygon clipping."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    area_a, area_b = a[2] * a[3], b[2] * b[3]
    if not (area_a > 0 and area_b > 0):
        raise GeometryError(f"degenerate box with zero area: {a if area_a <= 0 else b}")
    inter = abs(polygon_area(clip_convex(corners_bev(a), corners_bev(b))))
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0))


def riou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise rotated IoU ``(N, M)`` for BEV box arrays, vectorized.

    The intersection polygon is assembled from corners of each box inside the
    other plus all edge/edge crossings, ordered by angle about their centroid.
    """
    a = np.asarray(a, dtype=float).reshape(-1, 5)
    b = np.asarray(b, dtype=float).reshape(-1, 5)
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        return np.zeros((n, m))
    if np.any(a[:, 2] * a[:, 3] <= 0) or np.any(b[:, 2] * b[:, 3] <= 0):
        raise GeometryError("degenerate box with zero area")
    ca = corners_bev(a)[:, None, :, :]  # (n, 1, 4, 2)
    cb = corners_bev(b)[None, :, :, :]  # (1, m, 4, 2)
    ca, cb = np.broadcast_to(ca, (n, m, 4, 2)), np.broadcast_to(cb, (n, m, 4, 2))

    def inside(pts, poly):
        edge = np.roll(poly, -1, axis=2) - poly  # (n, m, 4, 2)
        rel = pts[:, :, :, None, :] - poly[:, :, None, :, :]  # (n, m, P, 4, 2)
        cr = edge[:, :, None, :, 0] * rel[..., 1] - edge[:, :, None, :, 1] * rel[..., 0]
        return np.all(cr >= -EDGE_TOL, axis=-1)

    in_a = inside(cb, ca)
    in_b = inside(ca, cb)
    # edge-edge intersections
    p, r = ca, np.roll(ca, -1, axis=2) - ca
    q, s = cb, np.roll(cb, -1, axis=2) - cb
    p, r = p[:, :, :, None, :], r[:, :, :, None, :]
    q, s = q[:, :, None, :, :], s[:, :, None, :, :]
    denom = r[..., 0] * s[..., 1] - r[..., 1] * s[..., 0]
    qp = q - p
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (qp[..., 0] * s[..., 1] - qp[..., 1] * s[..., 0]) / denom
        u = (qp[..., 0] * r[..., 1] - qp[..., 1] * r[..., 0]) / denom
    valid_x = (denom != 0) & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
    t = np.where(valid_x, t, 0.0)
    xpts = (p + t[..., None] * r).reshape(n, m, 16, 2)
    pts = np.concatenate([ca, cb, xpts], axis=2)  # (n, m, 24, 2)
    valid = np.concatenate([in_b, in_a, valid_x.reshape(n, m, 16)], axis=2)
    cnt = valid.sum(axis=2)
    centroid = (pts * valid[..., None]).sum(axis=2) / np.maximum(cnt, 1)[..., None]
    ang = np.arctan2(pts[..., 1] - centroid[..., None, 1], pts[..., 0] - centroid[..., None, 0])
    ang = np.where(valid, ang, np.inf)
    order = np.argsort(ang, axis=2, kind="stable")
    sp = np.take_along_axis(pts, order[..., None], axis=2)
    idx = np.arange(24)
    nxt = np.where(idx[None, None, :] + 1 < cnt[..., None], idx + 1, 0)
    sn = np.take_along_axis(sp, nxt[..., None], axis=2)
    cross = sp[..., 0] * sn[..., 1] - sp[..., 1] * sn[..., 0]
    cross = np.where(idx[None, None, :] < cnt[..., None], cross, 0.0)
    inter = np.where(cnt >= 3, 0.5 * np.abs(cross.sum(axis=2)), 0.0)
    area_a = (a[:, 2] * a[:, 3])[:, None]
    area_b = (b[:, 2] * b[:, 3])[None, :]
    return np.clip(inter / (area_a + area_b - inter), 0.0, 1.0)


def rotated_nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float,
                score_threshold: float = 0.0) -> np.ndarray:
    """Greedy rotated NMS; returns kept indices in descending-score order.

    Score ties keep the lower index first.
    """
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 5)
    scores = np.asarray(scores, dtype=float).reshape(-1)
    cand = np.flatnonzero(scores >= score_threshold)
    cand = cand[np.lexsort((cand, -scores[cand]))]
    kept: list[int] = []
    for i in cand:
        if kept:
            ious = riou_matrix(boxes[i][None], boxes[kept])[0]
            if np.any(ious > iou_threshold):
                continue
        kept.append(int(i))
    return np.array(kept, dtype=int)


def fit_box_from_quad(quad: np.ndarray) -> np.ndarray:
    """Fit a canonical BEV box to a quadrilateral.

    Center is the vertex mean, side lengths are means over opposite edges, and
    yaw is the circular (period pi) mean of the four edge directions with the
    odd edges turned by pi/2. Exact inverse of :func:`corners_bev` for true
    rectangles, up to canonicalization.
    """
    boxes, ok = fit_boxes_from_quads(np.asarray(quad, dtype=float)[None])
    if not ok[0]:
        raise GeometryError("self-intersecting or degenerate quadrilateral")
    return boxes[0]


def fit_boxes_from_quads(quads: np.ndarray):
    """Vectorized :func:`fit_box_from_quad`; returns ``(boxes, valid_mask)``."""
    q = np.asarray(quads, dtype=float).reshape(-1, 4, 2)
    edges = np.roll(q, -1, axis=1) - q  # e_k = v_{k+1} - v_k
    lens = np.hypot(edges[..., 0], edges[..., 1])
    nxt = np.roll(edges, -1, axis=1)
    turn = edges[..., 0] * nxt[..., 1] - edges[..., 1] * nxt[..., 0]
    area = 0.5 * np.sum(q[..., 0] * np.roll(q[..., 1], -1, axis=1)
                        - q[..., 1] * np.roll(q[..., 0], -1, axis=1), axis=1)
    ok = (np.all(turn > 0, axis=1) | np.all(turn < 0, axis=1)) & (np.abs(area) > 1e-12)
    ang2 = 2.0 * np.arctan2(edges[..., 1], edges[..., 0]) + np.array([0.0, np.pi, 0.0, np.pi])
    yaw = 0.5 * np.arctan2(np.sin(ang2).sum(axis=1), np.cos(ang2).sum(axis=1))
    center = q.mean(axis=1)
    l = 0.5 * (lens[:, 0] + lens[:, 2])
    w = 0.5 * (lens[:, 1] + lens[:, 3])
    boxes = canonical_bev(np.column_stack([center, l, w, yaw]))
    return boxes, ok


def points_in_box3d(points: np.ndarray, box: np.ndarray) -> np.ndarray:
    """Boolean mask of ``(N, >=3)`` points inside a 3D box (closed)."""
    x, y, z, l, w, h, yaw = (float(v) for v in box)
    d = np.asarray(points, dtype=float)[:, :3] - np.array([x, y, z])
    c, s = np.cos(yaw), np.sin(yaw)
    lx = c * d[:, 0] + s * d[:, 1]
    ly = -s * d[:, 0] + c * d[:, 1]
    return (np.abs(lx) <= l / 2) & (np.abs(ly) <= w / 2) & (np.abs(d[:, 2]) <= h / 2)

"""Slow reference implementations used as test oracles."""

from __future__ import annotations

import math

import numpy as np


def scatter_max_loop(src: np.ndarray, ordinal: np.ndarray, num_groups: int):
    """Per-group column max by explicit loops; first (lowest) index wins ties."""
    n, q = src.shape
    out = np.full((num_groups, q), -np.inf)
    arg = np.full((num_groups, q), -1, dtype=np.int64)
    for i in range(n):
        g = ordinal[i]
        for c in range(q):
            if src[i, c] > out[g, c]:
                out[g, c] = src[i, c]
                arg[g, c] = i
    return out, arg


def scatter_mean_loop(src: np.ndarray, ordinal: np.ndarray, num_groups: int) -> np.ndarray:
    """Per-group mean; sums run in ascending point order."""
    n, q = src.shape
    total = np.zeros((num_groups, q))
    count = np.zeros(num_groups)
    for i in range(n):
        total[ordinal[i]] += src[i]
        count[ordinal[i]] += 1
    return total / count[:, None]


def cursor_loop(points, scene_min, v_l, v_w, scale, width):
    out = []
    n_w = math.floor(width / (v_w * scale) + 1e-9)
    for x, y in np.asarray(points)[:, :2]:
        ix = math.floor((x - scene_min[0]) / (v_l * scale) + 1e-9)
        iy = math.floor((y - scene_min[1]) / (v_w * scale) + 1e-9)
        out.append(ix * n_w + iy)
    return np.array(out, dtype=np.int64)


def box_mask(px: np.ndarray, py: np.ndarray, box) -> np.ndarray:
    x, y, l, w, yaw = box
    c, s = math.cos(yaw), math.sin(yaw)
    dx, dy = px - x, py - y
    return (np.abs(c * dx + s * dy) <= l / 2) & (np.abs(-s * dx + c * dy) <= w / 2)


def riou_monte_carlo(a, b, n_samples: int, rng: np.random.Generator) -> float:
    """IoU from uniform samples inside the smaller box.

    The fraction of samples that also fall in the other box estimates the
    intersection area; the box areas ``l * w`` are exact. Every sample lands
    where the intersection can be, so the variance is far lower than sampling
    a common bounding square with the same budget.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    area_a, area_b = a[2] * a[3], b[2] * b[3]
    small, other = (a, b) if area_a <= area_b else (b, a)
    x, y, l, w, yaw = small
    u = rng.uniform(-l / 2, l / 2, n_samples)
    v = rng.uniform(-w / 2, w / 2, n_samples)
    c, s = math.cos(yaw), math.sin(yaw)
    inside = box_mask(x + c * u - s * v, y + s * u + c * v, other)
    inter = min(area_a, area_b) * np.count_nonzero(inside) / n_samples
    return inter / (area_a + area_b - inter)

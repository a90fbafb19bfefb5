"""Point-to-voxel cursors and index-based scatter/gather kernels.

Only the point -> voxel map is materialized. Scatter outputs are indexed by
dense group ordinal (occupied voxels in ascending voxel id), not by voxel id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .pointcloud_io import PointCloud, SceneSpec

# floor() slack for quotients that should be integral but land a few ulps low
_FLOOR_SLACK = 1e-9


def _robust_floor(v):
    return np.floor(np.asarray(v) + _FLOOR_SLACK).astype(np.int64)


@dataclass(frozen=True)
class VoxelGridSpec:
    """Pillar grid of base voxel size ``(v_L, v_W)`` enlarged by ``scale``."""

    scene: SceneSpec
    v_L: float = 0.2
    v_W: float = 0.2
    scale: float = 1.0

    def __post_init__(self):
        if not (self.v_L > 0 and self.v_W > 0 and self.scale > 0):
            raise ValueError("voxel sizes and scale must be positive")
        if self.n_L < 1 or self.n_W < 1:
            raise ValueError(f"grid at scale {self.scale} has no voxels")

    @property
    def v_H(self) -> float:
        return self.scene.H

    @property
    def pixel_L(self) -> float:
        return self.v_L * self.scale

    @property
    def pixel_W(self) -> float:
        return self.v_W * self.scale

    @property
    def n_L(self) -> int:
        return int(_robust_floor(self.scene.L / self.pixel_L))

    @property
    def n_W(self) -> int:
        return int(_robust_floor(self.scene.W / self.pixel_W))

    @property
    def n_voxels(self) -> int:
        return self.n_L * self.n_W

    def is_exact(self) -> bool:
        """True when the grid tiles the scene without remainder."""
        return (math.isclose(self.n_L * self.pixel_L, self.scene.L, rel_tol=1e-9)
                and math.isclose(self.n_W * self.pixel_W, self.scene.W, rel_tol=1e-9))

    def with_scale(self, scale: float) -> "VoxelGridSpec":
        return VoxelGridSpec(self.scene, self.v_L, self.v_W, scale)


def compute_cursors(cloud: PointCloud | np.ndarray, grid: VoxelGridSpec) -> np.ndarray:
    """Flat voxel id ``ix * n_W + iy`` for every point; nothing is dropped."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    if len(pts) == 0:
        return np.zeros(0, dtype=np.int64)
    lo, hi = grid.scene.min, grid.scene.max
    x, y = pts[:, 0], pts[:, 1]
    ix = _robust_floor((x - lo[0]) / grid.pixel_L)
    iy = _robust_floor((y - lo[1]) / grid.pixel_W)
    inside = (x >= lo[0]) & (x < hi[0]) & (y >= lo[1]) & (y < hi[1])
    bad = ~inside
    # an in-scene point may round up to index n at the far edge; on an inexact grid
    # that index is the uncovered remainder strip instead
    if grid.is_exact():
        ix, iy = np.minimum(ix, grid.n_L - 1), np.minimum(iy, grid.n_W - 1)
    bad |= (ix >= grid.n_L) | (iy >= grid.n_W)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(
            f"point {i} at {pts[i, :2].tolist()} maps outside the {grid.n_L}x{grid.n_W} grid; "
            "crop the cloud to the scene first")
    return ix * grid.n_W + iy


def cursor_to_pixel(cursors: np.ndarray, grid: VoxelGridSpec):
    """Inverse of the flat id: ``(c div n_W, c mod n_W)``."""
    c = np.asarray(cursors, dtype=np.int64)
    return c // grid.n_W, c % grid.n_W


@dataclass
class VoxelGroups:
    """Occupied voxels of one scale and the point partition they induce.

    ``voxel_ids[g]`` is the voxel of group ``g``; ``ordinal[i]`` the group of
    point ``i``. ``order`` lists points grouped by ordinal (ascending point
    index inside each group) and ``starts`` marks group boundaries in it.
    """

    voxel_ids: np.ndarray
    ordinal: np.ndarray
    order: np.ndarray
    starts: np.ndarray
    counts: np.ndarray

    @property
    def num_groups(self) -> int:
        return len(self.voxel_ids)

    def members(self, g: int) -> np.ndarray:
        return self.order[self.starts[g]:self.starts[g] + self.counts[g]]

    def as_dict(self) -> dict[int, list[int]]:
        return {int(v): self.members(g).tolist() for g, v in enumerate(self.voxel_ids)}


def build_groups(cursors: np.ndarray) -> VoxelGroups:
    cursors = np.asarray(cursors, dtype=np.int64)
    voxel_ids, ordinal, counts = np.unique(cursors, return_inverse=True, return_counts=True)
    ordinal = ordinal.reshape(-1)
    return _groups_from_ordinal(ordinal, len(voxel_ids), voxel_ids, counts)


def _groups_from_ordinal(ordinal, num_groups, voxel_ids=None, counts=None) -> VoxelGroups:
    ordinal = np.asarray(ordinal, dtype=np.int64)
    if counts is None:
        counts = np.bincount(ordinal, minlength=num_groups)
    if np.any(counts == 0):
        raise ValueError("every group ordinal must have at least one member")
    order = np.argsort(ordinal, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    if voxel_ids is None:
        voxel_ids = np.arange(num_groups)
    return VoxelGroups(voxel_ids, ordinal, order, starts, counts)


def _as_groups(index, num_groups) -> VoxelGroups:
    if isinstance(index, VoxelGroups):
        return index
    index = np.asarray(index, dtype=np.int64)
    if num_groups is None:
        num_groups = int(index.max()) + 1 if len(index) else 0
    if len(index) and (index.min() < 0 or index.max() >= num_groups):
        raise IndexError(f"group index outside [0, {num_groups})")
    return _groups_from_ordinal(index, num_groups)


def gather(values: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """Row slice ``values[indices]`` with bounds checking."""
    values = np.asarray(values)
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) and (indices.min() < 0 or indices.max() >= len(values)):
        raise IndexError(f"gather index out of range for {len(values)} rows")
    return values[indices]


def gather_backward(upstream: np.ndarray, indices: np.ndarray, num_rows: int) -> np.ndarray:
    """Adjoint of :func:`gather`: sum rows of ``upstream`` into their source rows."""
    out = np.zeros((num_rows,) + upstream.shape[1:])
    np.add.at(out, np.asarray(indices, dtype=np.int64), upstream)
    return out


def scatter_max(src: np.ndarray, index, num_groups: int | None = None):
    """Per-group column max and the point index that attains it.

    ``index`` is either per-point group ordinals or a :class:`VoxelGroups`.
    Ties go to the smallest point index.
    """
    src = np.asarray(src, dtype=float)
    groups = _as_groups(index, num_groups)
    if groups.num_groups == 0:
        return np.zeros((0,) + src.shape[1:]), np.zeros((0,) + src.shape[1:], dtype=np.int64)
    vals = src[groups.order]
    out = np.maximum.reduceat(vals, groups.starts, axis=0)
    winners = vals == out[groups.ordinal[groups.order]]
    cand = np.where(winners, groups.order[:, None], len(src))
    argmax = np.minimum.reduceat(cand, groups.starts, axis=0)
    return out, argmax


def scatter_max_backward(upstream: np.ndarray, argmax: np.ndarray, n: int) -> np.ndarray:
    """Route each group's gradient to its winning point, column by column."""
    grad = np.zeros((n,) + upstream.shape[1:])
    if upstream.size == 0:
        return grad
    cols = np.broadcast_to(np.arange(upstream.shape[1]), upstream.shape)
    # a point belongs to one group, so (winner, column) pairs never repeat
    grad[argmax, cols] = upstream
    return grad


def scatter_sum(src: np.ndarray, index, num_groups: int | None = None) -> np.ndarray:
    """Per-group sum, accumulated sequentially in ascending point order."""
    src = np.asarray(src, dtype=float)
    groups = _as_groups(index, num_groups)
    total = np.zeros((groups.num_groups,) + src.shape[1:])
    if groups.num_groups == 0:
        return total
    ordered = src[groups.order]
    # one vectorized step per within-group position keeps each group's additions in order
    for j in range(int(groups.counts.max())):
        live = np.flatnonzero(groups.counts > j)
        total[live] += ordered[groups.starts[live] + j]
    return total


def scatter_mean(src: np.ndarray, index, num_groups: int | None = None) -> np.ndarray:
    groups = _as_groups(index, num_groups)
    total = scatter_sum(src, groups)
    return total / groups.counts.reshape((-1,) + (1,) * (total.ndim - 1))


def scatter_mean_backward(upstream: np.ndarray, index, num_groups: int | None = None) -> np.ndarray:
    groups = _as_groups(index, num_groups)
    scaled = upstream / groups.counts.reshape((-1,) + (1,) * (upstream.ndim - 1))
    return scaled[groups.ordinal]

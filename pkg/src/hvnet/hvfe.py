"""Hybrid voxel feature extraction.

Points are encoded at every feature scale with one shared attentive encoder
(AVFE), the per-scale encodings are concatenated into a point-wise feature
``H``, and ``H`` is projected into a pseudo-image at every projection scale by
one shared attentive output layer (AVFEO).

Parameter names in the flat store::

    hvfe.point_embed   d     -> q     raw point -> F
    hvfe.attn_embed    2d    -> q     attention knowledge -> G
    hvfe.avfe_f        q     -> q
    hvfe.avfe_g        q     -> q
    hvfe.avfeo_h       e     -> n_h   e = 2 q |S_T|
    hvfe.avfeo_g       q     -> n_h
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_tensor import (DimensionError, LinearParams, accumulate, init_linear, linear_backward,
                          linear_forward, relu)
from .pointcloud_io import PointCloud
from .voxel_index import (VoxelGridSpec, VoxelGroups, build_groups, compute_cursors,
                          cursor_to_pixel, scatter_max, scatter_max_backward,
                          scatter_sum)


@dataclass(frozen=True)
class HvfeConfig:
    q: int = 64
    n_h: int = 128
    scales_t: tuple[float, ...] = (0.5, 1.0, 2.0)
    scales_r: tuple[float, ...] = (1.0, 2.0, 4.0)
    point_dim: int = 4
    normalize_inputs: bool = True
    rectify_after_multiply: bool = True

    def __post_init__(self):
        if not self.scales_t or not self.scales_r:
            raise ValueError("scales_t and scales_r must be non-empty")

    @property
    def e(self) -> int:
        return 2 * self.q * len(self.scales_t)


def init_hvfe_params(cfg: HvfeConfig, rng: np.random.Generator) -> dict:
    shapes = {
        "point_embed": (cfg.point_dim, cfg.q),
        "attn_embed": (2 * cfg.point_dim, cfg.q),
        "avfe_f": (cfg.q, cfg.q),
        "avfe_g": (cfg.q, cfg.q),
        "avfeo_h": (cfg.e, cfg.n_h),
        "avfeo_g": (cfg.q, cfg.n_h),
    }
    store = {}
    for name, (n_in, n_out) in shapes.items():
        p = init_linear(rng, n_in, n_out)
        store[f"hvfe.{name}.weight"] = p.weight
        store[f"hvfe.{name}.bias"] = p.bias
    return store


def _lin(store: dict, name: str) -> LinearParams:
    return LinearParams(store[f"hvfe.{name}.weight"], store[f"hvfe.{name}.bias"])


def _accumulate_linear(grads: dict, name: str, gw, gb) -> None:
    accumulate(grads, f"hvfe.{name}.weight", gw)
    accumulate(grads, f"hvfe.{name}.bias", gb)


# ---------------------------------------------------------------------------
# attention knowledge
# ---------------------------------------------------------------------------

def _order_free_mean(points: np.ndarray, groups: VoxelGroups) -> np.ndarray:
    # sum each group in value order so shuffling the cloud cannot change a bit
    keys = tuple(points[:, j] for j in reversed(range(points.shape[1]))) + (groups.ordinal,)
    order = np.lexsort(keys)
    total = np.add.reduceat(points[order], groups.starts, axis=0)
    return total / groups.counts[:, None]


def attention_knowledge(points: np.ndarray, groups: VoxelGroups) -> np.ndarray:
    """Per point: (xyz minus voxel mean xyz) ++ own features ++ voxel mean point.

    Output width is ``2 d``.
    """
    points = np.asarray(points, dtype=float)
    if len(points) == 0:
        return np.zeros((0, 2 * points.shape[1]))
    mean = _order_free_mean(points, groups)[groups.ordinal]
    centered = points[:, :3] - mean[:, :3]
    return np.hstack([centered, points[:, 3:], mean])


def _normalize_points(points: np.ndarray, grid: VoxelGridSpec) -> np.ndarray:
    scene = grid.scene
    center = 0.5 * (np.array(scene.min) + np.array(scene.max))
    half = 0.5 * np.array([scene.L, scene.W, scene.H])
    out = points.copy()
    out[:, :3] = (points[:, :3] - center) / half
    return out


def _normalize_attention(g: np.ndarray, grid: VoxelGridSpec, d: int) -> np.ndarray:
    # fixed diagonal rescale: offsets by voxel extent, voxel mean like a raw point
    out = g.copy()
    out[:, :3] = g[:, :3] / np.array([grid.pixel_L, grid.pixel_W, grid.scene.H])
    out[:, d:] = _normalize_points(g[:, d:], grid)
    return out


# ---------------------------------------------------------------------------
# AVFE / AVFEO
# ---------------------------------------------------------------------------

def _attentive_multiply(x, g, px: LinearParams, pg: LinearParams, rectify: bool):
    a = linear_forward(x, px)
    b = linear_forward(g, pg)
    prod = a * b
    return (relu(prod) if rectify else prod), (a, b, prod)


def _attentive_multiply_backward(d_m, x, g, px, pg, rectify, inner):
    a, b, prod = inner
    d_prod = d_m * (prod > 0) if rectify else d_m
    dx, dwx, dbx = linear_backward(x, px, d_prod * b)
    dg, dwg, dbg = linear_backward(g, pg, d_prod * a)
    return dx, dg, (dwx, dbx), (dwg, dbg)


def avfe_forward(F: np.ndarray, G: np.ndarray, groups: VoxelGroups,
                 params: tuple[LinearParams, LinearParams], rectify: bool = True):
    """Attentive encoding at one scale; returns ``(H_s, cache)`` with ``H_s`` of width ``2q``."""
    if F.shape[0] != G.shape[0]:
        raise DimensionError(f"F has {F.shape[0]} rows but G has {G.shape[0]}")
    pf, pg = params
    m, inner = _attentive_multiply(F, G, pf, pg, rectify)
    voxel, argmax = scatter_max(m, groups)
    h = np.hstack([m, voxel[groups.ordinal]])
    return h, (F, G, groups, params, rectify, inner, argmax)


def avfe_backward(d_h: np.ndarray, cache):
    """Returns ``(dF, dG, (dW_f, db_f), (dW_g, db_g))``."""
    F, G, groups, (pf, pg), rectify, inner, argmax = cache
    q = d_h.shape[1] // 2
    d_voxel = scatter_sum(d_h[:, q:], groups)
    d_m = d_h[:, :q] + scatter_max_backward(d_voxel, argmax, len(F))
    return _attentive_multiply_backward(d_m, F, G, pf, pg, rectify, inner)


def hvfe_aggregate(per_scale: list[np.ndarray]) -> np.ndarray:
    """Concatenate per-scale encodings column-wise (ascending scale order)."""
    if not per_scale:
        raise ValueError("need at least one scale")
    n = {h.shape[0] for h in per_scale}
    if len(n) != 1:
        raise DimensionError(f"inconsistent point counts across scales: {sorted(n)}")
    return np.hstack(per_scale)


def avfeo_project(H: np.ndarray, G: np.ndarray, groups: VoxelGroups,
                  params: tuple[LinearParams, LinearParams], grid: VoxelGridSpec,
                  rectify: bool = True):
    """Project point features to a ``(n_h, n_L, n_W)`` pseudo-image; returns ``(image, cache)``."""
    ph, pg = params
    n_h = ph.weight.shape[0]
    image = np.zeros((n_h, grid.n_L, grid.n_W))
    if len(H) == 0:
        return image, None
    m, inner = _attentive_multiply(H, G, ph, pg, rectify)
    voxel, argmax = scatter_max(m, groups)
    px, py = cursor_to_pixel(groups.voxel_ids, grid)
    if np.any(px >= grid.n_L) or np.any(py >= grid.n_W):
        raise ValueError("voxel id outside the pseudo-image")
    image[:, px, py] = voxel.T
    return image, (H, G, groups, params, rectify, inner, argmax, px, py)


def avfeo_backward(d_image: np.ndarray, cache):
    """Returns ``(dH, dG, (dW_h, db_h), (dW_g, db_g))`` or ``None`` for an empty cloud."""
    if cache is None:
        return None
    H, G, groups, (ph, pg), rectify, inner, argmax, px, py = cache
    d_voxel = d_image[:, px, py].T
    d_m = scatter_max_backward(d_voxel, argmax, len(H))
    return _attentive_multiply_backward(d_m, H, G, ph, pg, rectify, inner)


# ---------------------------------------------------------------------------
# full module
# ---------------------------------------------------------------------------

@dataclass
class HvfeState:
    """Forward products kept for backward and inspection."""

    points: np.ndarray
    point_in: np.ndarray
    F: np.ndarray
    attn_in: dict
    G: dict
    groups: dict
    H_parts: list
    H: np.ndarray
    avfe_caches: list
    avfeo_caches: list
    d_F: np.ndarray | None = None


def hvfe_forward(cloud: PointCloud, cfg: HvfeConfig, store: dict, base_grid: VoxelGridSpec):
    """Encode a cropped cloud; returns ``(pseudo_images, state)``.

    ``pseudo_images[r]`` has shape ``(n_h, n_L, n_W)`` for ``cfg.scales_r[r]``.
    """
    pts = cloud.points
    d = pts.shape[1]
    if d != cfg.point_dim:
        raise ValueError(f"cloud has {d} values per point, config expects {cfg.point_dim}")
    rect = cfg.rectify_after_multiply
    all_scales = sorted(set(cfg.scales_t) | set(cfg.scales_r))
    groups, attn_in, G = {}, {}, {}
    p_embed, a_embed = _lin(store, "point_embed"), _lin(store, "attn_embed")
    point_in = _normalize_points(pts, base_grid) if cfg.normalize_inputs else pts
    F = linear_forward(point_in, p_embed, activated=True)
    for s in all_scales:
        grid = base_grid.with_scale(s)
        groups[s] = build_groups(compute_cursors(pts, grid))
        g = attention_knowledge(pts, groups[s])
        attn_in[s] = _normalize_attention(g, grid, d) if cfg.normalize_inputs else g
        G[s] = linear_forward(attn_in[s], a_embed, activated=True)
    avfe_params = (_lin(store, "avfe_f"), _lin(store, "avfe_g"))
    H_parts, avfe_caches = [], []
    for s in sorted(cfg.scales_t):
        h, c = avfe_forward(F, G[s], groups[s], avfe_params, rect)
        H_parts.append(h)
        avfe_caches.append(c)
    H = hvfe_aggregate(H_parts)
    avfeo_params = (_lin(store, "avfeo_h"), _lin(store, "avfeo_g"))
    images, avfeo_caches = [], []
    for s in sorted(cfg.scales_r):
        img, c = avfeo_project(H, G[s], groups[s], avfeo_params, base_grid.with_scale(s), rect)
        images.append(img)
        avfeo_caches.append(c)
    state = HvfeState(pts, point_in, F, attn_in, G, groups, H_parts, H, avfe_caches, avfeo_caches)
    return images, state


def hvfe_backward(d_images: list[np.ndarray], state: HvfeState, cfg: HvfeConfig,
                  store: dict) -> dict:
    """Parameter gradients of ``sum <d_images[r], images[r]>``."""
    if state is None:
        raise RuntimeError("hvfe_backward needs the state from a matching hvfe_forward call")
    grads = {k: np.zeros_like(v) for k, v in store.items() if k.startswith("hvfe.")}
    n = len(state.points)
    if n == 0:
        return grads
    d_H = np.zeros_like(state.H)
    d_G = {s: np.zeros_like(g) for s, g in state.G.items()}
    for s, d_img, cache in zip(sorted(cfg.scales_r), d_images, state.avfeo_caches):
        dh, dg, (dwh, dbh), (dwg, dbg) = avfeo_backward(d_img, cache)
        d_H += dh
        d_G[s] += dg
        _accumulate_linear(grads, "avfeo_h", dwh, dbh)
        _accumulate_linear(grads, "avfeo_g", dwg, dbg)
    d_F = np.zeros_like(state.F)
    width = 2 * cfg.q
    for t, (s, cache) in enumerate(zip(sorted(cfg.scales_t), state.avfe_caches)):
        df, dg, (dwf, dbf), (dwg, dbg) = avfe_backward(d_H[:, t * width:(t + 1) * width], cache)
        d_F += df
        d_G[s] += dg
        _accumulate_linear(grads, "avfe_f", dwf, dbf)
        _accumulate_linear(grads, "avfe_g", dwg, dbg)
    a_embed = _lin(store, "attn_embed")
    for s, dg in d_G.items():
        _, dw, db = linear_backward(state.attn_in[s], a_embed, dg, activated=True)
        _accumulate_linear(grads, "attn_embed", dw, db)
    _, dw, db = linear_backward(state.point_in, _lin(store, "point_embed"), d_F, activated=True)
    _accumulate_linear(grads, "point_embed", dw, db)
    state.d_F = d_F
    return grads

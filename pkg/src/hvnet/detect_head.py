"""Anchors, target assignment, head branches, losses, decoding and AP_40.

Flat anchor order for a class map of shape ``(H, W)`` is pixel-major
``(ix, iy, a)`` with ``a = size_index * n_orientations + orientation_index``.
Head outputs are reshaped into that order: classification logits ``(n,)``,
corner offsets ``(n, 8)`` laid out ``(dx1, dy1, ..., dx4, dy4)``, and vertical
offsets ``(n, 2)`` as ``(dz, dh)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core_tensor import ConvLayer, init_conv
from .rotbox import (GeometryError, bev_of, canonical_box3d, corners_bev,
                     fit_boxes_from_quads, riou_matrix, rotated_nms)

QUARTER_TURNS = (0.0, math.pi / 4, math.pi / 2, 3 * math.pi / 4)


@dataclass(frozen=True)
class AnchorConfig:
    # per class list of (w, l, h); order Pedestrian, Cyclist, Car
    sizes: tuple[tuple[tuple[float, float, float], ...], ...] = (
        ((0.8, 0.8, 1.7),),
        ((0.8, 1.8, 1.5),),
        ((1.7, 3.5, 1.56), (2.0, 6.0, 1.56)),
    )
    orientations: tuple[float, ...] = QUARTER_TURNS
    z_centers: tuple[float, ...] = (-1.0, -1.0, -1.0)
    pos_thresholds: tuple[float, ...] = (0.35, 0.35, 0.5)
    neg_thresholds: tuple[float, ...] = (0.25, 0.25, 0.35)
    force_best_anchor: bool = True

    def __post_init__(self):
        for p, n in zip(self.pos_thresholds, self.neg_thresholds):
            if not p > n:
                raise ValueError("positive threshold must exceed negative threshold")

    def n_anchors(self, cls: int) -> int:
        return len(self.sizes[cls]) * len(self.orientations)


@dataclass(frozen=True)
class LossConfig:
    alpha: tuple[float, ...] = (0.75, 0.75, 0.25)
    gamma: tuple[float, ...] = (2.0, 2.0, 2.0)
    w_loc: float = 1.0
    w_cls: float = 1.0
    w_h: float = 1.5


@dataclass(frozen=True)
class FeatureGeometry:
    """Maps pixel ``(ix, iy)`` of a class map to BEV meters."""

    origin: tuple[float, float]  # scene (x_min, y_min)
    pixel: tuple[float, float]  # meters per pixel along x and y
    shape: tuple[int, int]  # (n_L, n_W)


# ---------------------------------------------------------------------------
# anchors and targets
# ---------------------------------------------------------------------------

def generate_anchors(geom: FeatureGeometry, cfg: AnchorConfig, cls: int) -> np.ndarray:
    """``(H * W * A, 7)`` canonical anchors centered on pixel centers."""
    nl, nw = geom.shape
    cx = geom.origin[0] + (np.arange(nl) + 0.5) * geom.pixel[0]
    cy = geom.origin[1] + (np.arange(nw) + 0.5) * geom.pixel[1]
    per_pixel = np.array([[w, l, h, yaw] for (w, l, h) in cfg.sizes[cls] for yaw in cfg.orientations])
    a = len(per_pixel)
    gx, gy = np.meshgrid(cx, cy, indexing="ij")
    out = np.empty((nl, nw, a, 7))
    out[..., 0] = gx[..., None]
    out[..., 1] = gy[..., None]
    out[..., 2] = cfg.z_centers[cls]
    out[..., 3] = per_pixel[:, 1]
    out[..., 4] = per_pixel[:, 0]
    out[..., 5] = per_pixel[:, 2]
    out[..., 6] = per_pixel[:, 3]
    return canonical_box3d(out.reshape(-1, 7))


@dataclass
class TargetAssignment:
    """``labels``: 1 positive, 0 negative, -1 ignore; ``matched`` is the gt index or -1."""

    labels: np.ndarray
    matched: np.ndarray
    corner_targets: np.ndarray  # (n, 8), zero for non-positives
    vertical_targets: np.ndarray  # (n, 2)

    @property
    def n_pos(self) -> int:
        return int(np.sum(self.labels == 1))


def corner_offsets(anchor_bev: np.ndarray, gt_bev: np.ndarray) -> np.ndarray:
    """Offsets ``gt_corners - anchor_corners`` under the cyclic corner
    correspondence with the smallest total norm. Accepts ``(n, 5)`` pairs."""
    ca = corners_bev(np.asarray(anchor_bev).reshape(-1, 5))
    cg = corners_bev(np.asarray(gt_bev).reshape(-1, 5))
    best = None
    best_norm = None
    for k in range(4):
        d = np.roll(cg, -k, axis=1) - ca
        norm = np.sum(d * d, axis=(1, 2))
        if best is None:
            best, best_norm = d, norm
        else:
            better = norm < best_norm
            best = np.where(better[:, None, None], d, best)
            best_norm = np.where(better, norm, best_norm)
    return best.reshape(-1, 8)


def anchor_gt_iou(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """BEV RIoU ``(n_anchors, n_gt)``, computed only where circumcircles meet."""
    a_bev, g_bev = bev_of(anchors), bev_of(gts)
    iou = np.zeros((len(a_bev), len(g_bev)))
    ra = 0.5 * np.hypot(a_bev[:, 2], a_bev[:, 3])
    for k, g in enumerate(g_bev):
        rg = 0.5 * math.hypot(g[2], g[3])
        near = np.hypot(a_bev[:, 0] - g[0], a_bev[:, 1] - g[1]) < ra + rg
        if np.any(near):
            iou[near, k] = riou_matrix(a_bev[near], g[None])[:, 0]
    return iou


def assign_targets(anchors: np.ndarray, gt_boxes: np.ndarray, cfg: AnchorConfig,
                   cls: int) -> TargetAssignment:
    """Assign one class's anchors to that class's ground-truth boxes."""
    n = len(anchors)
    gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, 7)
    labels = np.zeros(n, dtype=int)
    matched = np.full(n, -1)
    corner_t = np.zeros((n, 8))
    vert_t = np.zeros((n, 2))
    if len(gt_boxes) == 0 or n == 0:
        return TargetAssignment(labels, matched, corner_t, vert_t)
    iou = anchor_gt_iou(anchors, gt_boxes)
    best_gt = np.argmax(iou, axis=1)
    best_iou = iou[np.arange(n), best_gt]
    pos = best_iou > cfg.pos_thresholds[cls]
    labels[best_iou >= cfg.neg_thresholds[cls]] = -1
    labels[pos] = 1
    matched[pos] = best_gt[pos]
    if cfg.force_best_anchor:
        for k in range(len(gt_boxes)):
            a = int(np.argmax(iou[:, k]))
            if iou[a, k] > 0:
                labels[a] = 1
                matched[a] = k
    idx = np.flatnonzero(labels == 1)
    g = gt_boxes[matched[idx]]
    corner_t[idx] = corner_offsets(bev_of(anchors[idx]), bev_of(g))
    vert_t[idx, 0] = g[:, 2] - anchors[idx, 2]
    vert_t[idx, 1] = g[:, 5] - anchors[idx, 5]
    return TargetAssignment(labels, matched, corner_t, vert_t)


# ---------------------------------------------------------------------------
# head branches
# ---------------------------------------------------------------------------

@dataclass
class HeadOutput:
    logits: np.ndarray  # (n,)
    corners: np.ndarray  # (n, 8)
    vertical: np.ndarray  # (n, 2)

    @property
    def scores(self) -> np.ndarray:
        return sigmoid(self.logits)


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _to_flat(x: np.ndarray, a: int, width: int) -> np.ndarray:
    # (a * width, H, W) -> (H * W * a, width)
    _, h, w = x.shape
    return x.reshape(a, width, h, w).transpose(2, 3, 0, 1).reshape(-1, width)


def _from_flat(x: np.ndarray, a: int, width: int, h: int, w: int) -> np.ndarray:
    return x.reshape(h, w, a, width).transpose(2, 3, 0, 1).reshape(a * width, h, w)


class DetectionHead:
    """Three parallel 3x3 conv branches per class; one class per head."""

    def __init__(self, anchors: AnchorConfig, in_channels: int, cls_prior: float = 0.01):
        self.anchor_cfg = anchors
        self.in_channels = in_channels
        self.cls_prior = cls_prior
        self.branches = []
        for k in range(len(anchors.sizes)):
            self.branches.append({
                "cls": ConvLayer(f"head{k}.cls", 1, 1, activated=False),
                "loc": ConvLayer(f"head{k}.loc", 1, 1, activated=False),
                "vert": ConvLayer(f"head{k}.vert", 1, 1, activated=False),
            })

    def channel_counts(self, cls: int) -> dict[str, int]:
        a = self.anchor_cfg.n_anchors(cls)
        return {"cls": a, "loc": 8 * a, "vert": 2 * a}

    def init_params(self, rng: np.random.Generator) -> dict:
        store = {}
        bias0 = -math.log((1 - self.cls_prior) / self.cls_prior)
        for k, br in enumerate(self.branches):
            for kind, c_out in self.channel_counts(k).items():
                p = init_conv(rng, self.in_channels, c_out, 3)
                p.weight *= 0.1  # output layers start near zero
                if kind == "cls":
                    p.bias[:] = bias0
                store[br[kind].name + ".weight"] = p.weight
                store[br[kind].name + ".bias"] = p.bias
        return store

    def forward(self, store: dict, features: list[np.ndarray]):
        outs, caches = [], []
        for k, (x, br) in enumerate(zip(features, self.branches)):
            a = self.anchor_cfg.n_anchors(k)
            y_c, c_c = br["cls"].forward(store, x)
            y_l, c_l = br["loc"].forward(store, x)
            y_v, c_v = br["vert"].forward(store, x)
            outs.append(HeadOutput(_to_flat(y_c, a, 1)[:, 0], _to_flat(y_l, a, 8), _to_flat(y_v, a, 2)))
            caches.append((x.shape, c_c, c_l, c_v))
        return outs, caches

    def backward(self, store: dict, d_outs: list[HeadOutput], caches, grads: dict):
        d_feats = []
        for k, (d, br, cache) in enumerate(zip(d_outs, self.branches, caches)):
            (_, h, w), c_c, c_l, c_v = cache
            a = self.anchor_cfg.n_anchors(k)
            dx = br["cls"].backward(store, _from_flat(d.logits[:, None], a, 1, h, w), c_c, grads)
            dx = dx + br["loc"].backward(store, _from_flat(d.corners, a, 8, h, w), c_l, grads)
            dx = dx + br["vert"].backward(store, _from_flat(d.vertical, a, 2, h, w), c_v, grads)
            d_feats.append(dx)
        return d_feats


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

P_CLAMP = 1e-7


def smooth_l1(d: np.ndarray) -> np.ndarray:
    ad = np.abs(d)
    return np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)


def smooth_l1_grad(d: np.ndarray) -> np.ndarray:
    return np.where(np.abs(d) < 1.0, d, np.sign(d))


def focal_loss(p: np.ndarray, positive: np.ndarray, alpha: float, gamma: float) -> np.ndarray:
    """Element-wise focal loss on probabilities (clamped to ``[1e-7, 1 - 1e-7]``)."""
    p = np.clip(np.asarray(p, dtype=float), P_CLAMP, 1 - P_CLAMP)
    pos = -alpha * (1 - p) ** gamma * np.log(p)
    neg = -(1 - alpha) * p ** gamma * np.log(1 - p)
    return np.where(positive, pos, neg)


def focal_loss_logit_grad(z: np.ndarray, positive: np.ndarray, alpha: float,
                          gamma: float) -> np.ndarray:
    """d focal_loss(sigmoid(z)) / dz; zero where the clamp is active."""
    p_raw = sigmoid(z)
    p = np.clip(p_raw, P_CLAMP, 1 - P_CLAMP)
    active = p == p_raw
    g_pos = alpha * (gamma * (1 - p) ** gamma * p * np.log(p) - (1 - p) ** (gamma + 1))
    g_neg = -(1 - alpha) * (gamma * p ** gamma * (1 - p) * np.log(1 - p) - p ** (gamma + 1))
    return np.where(active, np.where(positive, g_pos, g_neg), 0.0)


def corner_loss(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.sum(smooth_l1(np.asarray(pred) - np.asarray(target))))


@dataclass
class LossBreakdown:
    total: float
    loc: float
    cls: float
    h: float
    n_pos: int
    grads: list = field(default_factory=list, repr=False)


def total_loss(assignments: list[TargetAssignment], preds: list[HeadOutput],
               cfg: LossConfig) -> LossBreakdown:
    """Weighted sum of localization, focal and vertical terms over global ``N_pos``.

    ``grads`` holds one :class:`HeadOutput` of gradients per class.
    """
    n_pos = sum(a.n_pos for a in assignments)
    norm = 1.0 / max(n_pos, 1)
    l_loc = l_cls = l_h = 0.0
    grads = []
    for k, (asg, pr) in enumerate(zip(assignments, preds)):
        pos = asg.labels == 1
        care = asg.labels >= 0
        p = sigmoid(pr.logits)
        fl = focal_loss(p, pos, cfg.alpha[k], cfg.gamma[k])
        l_cls += float(np.sum(fl[care]))
        d_logits = np.where(care, focal_loss_logit_grad(pr.logits, pos, cfg.alpha[k], cfg.gamma[k]), 0.0)
        d_c = (pr.corners - asg.corner_targets) * pos[:, None]
        d_v = (pr.vertical - asg.vertical_targets) * pos[:, None]
        l_loc += float(np.sum(smooth_l1(d_c)))
        l_h += float(np.sum(smooth_l1(d_v)))
        grads.append(HeadOutput(
            norm * cfg.w_cls * d_logits,
            norm * cfg.w_loc * smooth_l1_grad(d_c) * pos[:, None],
            norm * cfg.w_h * smooth_l1_grad(d_v) * pos[:, None],
        ))
    total = norm * (cfg.w_loc * l_loc + cfg.w_cls * l_cls + cfg.w_h * l_h)
    return LossBreakdown(total, l_loc, l_cls, l_h, n_pos, grads)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

@dataclass
class DetectionSet:
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 7)))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.scores)


@dataclass(frozen=True)
class DecodeConfig:
    score_threshold: float = 0.2
    nms_thresholds: tuple[float, ...] = (0.02, 0.02, 0.4)
    max_candidates: int = 1000
    per_class_nms: bool = True


def decode_boxes(anchors: np.ndarray, corners: np.ndarray, vertical: np.ndarray):
    """Apply predicted offsets; returns ``(boxes (n, 7), valid mask)``."""
    quads = corners_bev(bev_of(anchors)) + np.asarray(corners).reshape(-1, 4, 2)
    bev, ok = fit_boxes_from_quads(quads)
    boxes = np.empty((len(anchors), 7))
    boxes[:, [0, 1, 3, 4, 6]] = bev
    boxes[:, 2] = anchors[:, 2] + vertical[:, 0]
    boxes[:, 5] = anchors[:, 5] + vertical[:, 1]
    ok &= boxes[:, 5] > 0
    return boxes, ok


def decode_detections(anchors: list[np.ndarray], preds: list[HeadOutput],
                      cfg: DecodeConfig = DecodeConfig()) -> DetectionSet:
    all_boxes, all_labels, all_scores = [], [], []
    dropped = 0
    for k, (anc, pr) in enumerate(zip(anchors, preds)):
        scores = pr.scores
        idx = np.flatnonzero(scores >= cfg.score_threshold)
        idx = idx[np.lexsort((idx, -scores[idx]))][:cfg.max_candidates]
        if len(idx) == 0:
            continue
        boxes, ok = decode_boxes(anc[idx], pr.corners[idx], pr.vertical[idx])
        dropped += int(np.sum(~ok))
        boxes, sc = boxes[ok], scores[idx][ok]
        if cfg.per_class_nms:
            keep = rotated_nms(bev_of(boxes), sc, cfg.nms_thresholds[k])
            boxes, sc = boxes[keep], sc[keep]
        all_boxes.append(boxes)
        all_labels.append(np.full(len(sc), k))
        all_scores.append(sc)
    if not all_boxes:
        return DetectionSet(dropped=dropped)
    det = DetectionSet(np.vstack(all_boxes), np.concatenate(all_labels),
                       np.concatenate(all_scores), dropped)
    if not cfg.per_class_nms and len(det):
        keep = rotated_nms(bev_of(det.boxes), det.scores, max(cfg.nms_thresholds))
        det = DetectionSet(det.boxes[keep], det.labels[keep], det.scores[keep], dropped)
    return det


# ---------------------------------------------------------------------------
# AP over 40 recall positions
# ---------------------------------------------------------------------------

def ap_40(detections: list[tuple[np.ndarray, np.ndarray]], gts: list[np.ndarray],
          iou_threshold: float) -> float:
    """AP sampled at recalls 1/40 ... 1.

    ``detections[i]`` is ``(boxes, scores)`` for scene ``i`` and ``gts[i]`` its
    ground-truth boxes; boxes are BEV ``(x, y, l, w, yaw)`` or 3D. Returns NaN
    when there is no ground truth at all.
    """
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        return float("nan")
    records = []  # (score, scene, det index)
    for s, (boxes, scores) in enumerate(detections):
        for i, sc in enumerate(np.asarray(scores).reshape(-1)):
            records.append((-float(sc), s, i))
    records.sort()
    matched = [np.zeros(len(g), dtype=bool) for g in gts]
    ious = []
    for (boxes, _), g in zip(detections, gts):
        b = _as_bev(boxes)
        gb = _as_bev(g)
        ious.append(riou_matrix(b, gb) if len(b) and len(gb) else np.zeros((len(b), len(gb))))
    tp = np.zeros(len(records))
    for r, (_, s, i) in enumerate(records):
        if ious[s].shape[1] == 0:
            continue
        cand = np.where(matched[s], -1.0, ious[s][i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_threshold:
            matched[s][j] = True
            tp[r] = 1
    if len(records) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(records) + 1)
    recall = ctp / n_gt
    samples = []
    for r in np.arange(1, 41) / 40.0:
        reach = precision[recall >= r - 1e-12]
        samples.append(reach.max() if len(reach) else 0.0)
    return float(np.mean(samples))


def _as_bev(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=float)
    if b.size == 0:
        return np.zeros((0, 5))
    return bev_of(b) if b.shape[-1] == 7 else b.reshape(-1, 5)


__all__ = [
    "AnchorConfig", "LossConfig", "FeatureGeometry", "TargetAssignment", "HeadOutput",
    "DetectionHead", "DetectionSet", "DecodeConfig", "GeometryError",
    "generate_anchors", "assign_targets", "corner_offsets", "focal_loss", "corner_loss",
    "total_loss", "decode_boxes", "decode_detections", "ap_40", "sigmoid",
]

"""Point cloud ingestion: KITTI files, cropping, global augmentation, toy scenes."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rotbox import (bev_of, canonical_box3d, corners_bev, points_in_box3d,
                     riou_matrix)

log = logging.getLogger(__name__)

CLASS_NAMES = ("Pedestrian", "Cyclist", "Car")


class FormatError(ValueError):
    """Malformed point cloud or label file."""


@dataclass(frozen=True)
class SceneSpec:
    min: tuple[float, float, float] = (0.0, -32.0, -3.0)
    max: tuple[float, float, float] = (64.0, 32.0, 2.0)

    def __post_init__(self):
        if len(self.min) != 3 or len(self.max) != 3:
            raise ValueError("scene bounds need three components")
        if any(hi <= lo for lo, hi in zip(self.min, self.max)):
            raise ValueError(f"scene max {self.max} must exceed min {self.min}")

    @property
    def L(self) -> float:
        return self.max[0] - self.min[0]

    @property
    def W(self) -> float:
        return self.max[1] - self.min[1]

    @property
    def H(self) -> float:
        return self.max[2] - self.min[2]


@dataclass
class PointCloud:
    """``points`` is ``(N, d)``: x, y, z in meters followed by ``d - 3`` features."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.size == 0:
            pts = pts.reshape(0, pts.shape[-1] if pts.ndim == 2 else 4)
        self.points = pts
        if pts.ndim != 2 or pts.shape[1] < 3:
            raise ValueError("points need at least x, y, z")

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]


@dataclass
class LabeledScene:
    """A cloud with 3D boxes ``(K, 7)`` and integer class ids into :data:`CLASS_NAMES`."""

    cloud: PointCloud
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 7)))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=float).reshape(-1, 7)
        self.labels = np.asarray(self.labels, dtype=int).reshape(-1)
        if len(self.boxes) != len(self.labels):
            raise ValueError("one label per box required")


# ---------------------------------------------------------------------------
# KITTI velodyne .bin
# ---------------------------------------------------------------------------

def read_kitti_bin(path) -> PointCloud:
    """Parse little-endian float32 ``(x, y, z, reflectance)`` records.

    Records containing non-finite values are dropped with a warning.
    """
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise FormatError(
            f"{path}: length {len(raw)} not a multiple of 16; truncated record at byte "
            f"offset {len(raw) - len(raw) % 16}")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(float)
    finite = np.all(np.isfinite(pts), axis=1)
    if not finite.all():
        log.warning("%s: rejected %d non-finite points", path, int((~finite).sum()))
        pts = pts[finite]
    return PointCloud(pts)


def write_kitti_bin(path, cloud: PointCloud) -> None:
    pts = cloud.points
    if pts.shape[1] != 4:
        raise ValueError("KITTI .bin stores exactly 4 values per point")
    Path(path).write_bytes(np.ascontiguousarray(pts, dtype="<f4").tobytes())


# ---------------------------------------------------------------------------
# KITTI label text (LiDAR frame; see README)
# ---------------------------------------------------------------------------

def _kitti_yaw(yaw: float) -> float:
    # canonical yaw is in [0, pi); labels use [-pi/2, pi/2)
    return yaw - math.pi if yaw >= math.pi / 2 else yaw


def format_label_lines(boxes: np.ndarray, labels: np.ndarray,
                       scores: np.ndarray | None = None) -> str:
    lines = []
    for i, (b, c) in enumerate(zip(np.asarray(boxes).reshape(-1, 7), labels)):
        x, y, z, l, w, h, yaw = b
        fields = [CLASS_NAMES[int(c)], "0.00", "0", "-10.00",
                  "0.00", "0.00", "0.00", "0.00",
                  f"{h:.4f}", f"{w:.4f}", f"{l:.4f}",
                  f"{x:.4f}", f"{y:.4f}", f"{z:.4f}", f"{_kitti_yaw(yaw):.6f}"]
        if scores is not None:
            fields.append(f"{scores[i]:.6f}")
        lines.append(" ".join(fields))
    return "".join(line + "\n" for line in lines)


def parse_label_text(text: str, source: str = "<label>"):
    """Parse label lines into ``(boxes, labels, scores)``; unknown classes are skipped."""
    boxes, labels, scores = [], [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) not in (15, 16):
            raise FormatError(f"{source}:{lineno}: expected 15 or 16 fields, got {len(parts)}")
        if parts[0] not in CLASS_NAMES:
            continue
        try:
            vals = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise FormatError(f"{source}:{lineno}: {exc}") from None
        h, w, l, x, y, z, ry = vals[7:14]
        boxes.append([x, y, z, l, w, h, ry])
        labels.append(CLASS_NAMES.index(parts[0]))
        scores.append(vals[14] if len(vals) == 15 else 1.0)
    boxes = canonical_box3d(np.array(boxes, dtype=float).reshape(-1, 7))
    return boxes, np.array(labels, dtype=int), np.array(scores, dtype=float)


def read_label_file(path):
    return parse_label_text(Path(path).read_text(), str(path))


# ---------------------------------------------------------------------------
# cropping and augmentation
# ---------------------------------------------------------------------------

def crop_to_scene(cloud: PointCloud, scene: SceneSpec) -> PointCloud:
    """Keep points with ``min <= xyz < max``; order preserved."""
    xyz = cloud.xyz
    keep = np.all((xyz >= np.array(scene.min)) & (xyz < np.array(scene.max)), axis=1)
    return PointCloud(cloud.points[keep])


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    rotation_range: tuple[float, float] = (-math.pi / 2, math.pi / 2)
    scale_range: tuple[float, float] = (0.95, 1.05)
    translation_std: tuple[float, float, float] = (0.2, 0.2, 0.2)


def apply_global_transform(scene: LabeledScene, flip: bool, angle: float, scale: float,
                           translation) -> LabeledScene:
    """Flip about the x axis, rotate about z, scale, then translate."""
    pts = scene.cloud.points.copy()
    boxes = scene.boxes.copy()
    if flip:
        pts[:, 1] = -pts[:, 1]
        boxes[:, 1] = -boxes[:, 1]
        boxes[:, 6] = -boxes[:, 6]
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    pts[:, :2] = pts[:, :2] @ rot.T
    boxes[:, :2] = boxes[:, :2] @ rot.T
    boxes[:, 6] += angle
    pts[:, :3] *= scale
    boxes[:, :6] *= scale
    t = np.asarray(translation, dtype=float)
    pts[:, :3] += t
    boxes[:, :3] += t
    return LabeledScene(PointCloud(pts), canonical_box3d(boxes), scene.labels.copy())


def augment_global(scene: LabeledScene, rng: np.random.Generator,
                   cfg: AugmentConfig = AugmentConfig()) -> LabeledScene:
    flip = bool(rng.random() < cfg.flip_prob)
    angle = float(rng.uniform(*cfg.rotation_range))
    scale = float(rng.uniform(*cfg.scale_range))
    translation = rng.normal(0.0, cfg.translation_std)
    return apply_global_transform(scene, flip, angle, scale, translation)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObjectTemplate:
    label: int
    size: tuple[float, float, float]  # (w, l, h)
    count: int = 1


@dataclass(frozen=True)
class ToySceneConfig:
    templates: tuple[ObjectTemplate, ...] = (
        ObjectTemplate(0, (0.8, 0.8, 1.7)),
        ObjectTemplate(1, (0.8, 1.8, 1.5)),
        ObjectTemplate(2, (1.7, 3.5, 1.56)),
    )
    surface_density: float = 30.0  # points per square meter of box surface
    clutter_points: int = 400
    ground_z: float = -1.7
    size_jitter: float = 0.05
    margin: float = 1.0  # free space kept around every footprint (meters)
    max_tries: int = 1000


def _surface_points(rng: np.random.Generator, box: np.ndarray, density: float) -> np.ndarray:
    x, y, z, l, w, h, yaw = box
    # sides and roof; slightly shrunk so every sample is strictly inside the box
    li, wi, hi = l * 0.98, w * 0.98, h * 0.98
    faces = [  # (area, sampler in box frame)
        (li * hi, lambda n: np.column_stack([rng.uniform(-li / 2, li / 2, n), np.full(n, wi / 2), rng.uniform(-hi / 2, hi / 2, n)])),
        (li * hi, lambda n: np.column_stack([rng.uniform(-li / 2, li / 2, n), np.full(n, -wi / 2), rng.uniform(-hi / 2, hi / 2, n)])),
        (wi * hi, lambda n: np.column_stack([np.full(n, li / 2), rng.uniform(-wi / 2, wi / 2, n), rng.uniform(-hi / 2, hi / 2, n)])),
        (wi * hi, lambda n: np.column_stack([np.full(n, -li / 2), rng.uniform(-wi / 2, wi / 2, n), rng.uniform(-hi / 2, hi / 2, n)])),
        (li * wi, lambda n: np.column_stack([rng.uniform(-li / 2, li / 2, n), rng.uniform(-wi / 2, wi / 2, n), np.full(n, hi / 2)])),
    ]
    local = np.concatenate([f(max(1, int(round(a * density)))) for a, f in faces])
    c, s = math.cos(yaw), math.sin(yaw)
    world = np.column_stack([x + c * local[:, 0] - s * local[:, 1],
                             y + s * local[:, 0] + c * local[:, 1],
                             z + local[:, 2]])
    refl = rng.uniform(0.0, 1.0, (len(world), 1))
    return np.hstack([world, refl])


def synth_toy_scene(rng: np.random.Generator, scene: SceneSpec,
                    cfg: ToySceneConfig = ToySceneConfig()) -> LabeledScene:
    """Boxes with disjoint (margin-padded) footprints, surface points, and ground clutter."""
    boxes, labels = [], []
    lo, hi = np.array(scene.min), np.array(scene.max)
    for tmpl in cfg.templates:
        for _ in range(tmpl.count):
            w, l, h = (v * rng.uniform(1 - cfg.size_jitter, 1 + cfg.size_jitter) for v in tmpl.size)
            for _ in range(cfg.max_tries):
                yaw = rng.uniform(0.0, math.pi)
                xy = rng.uniform(lo[:2], hi[:2])
                box = canonical_box3d([xy[0], xy[1], cfg.ground_z + h / 2, l, w, h, yaw])
                corners = corners_bev(bev_of(box))
                if np.any(corners < lo[:2] + 0.5) or np.any(corners >= hi[:2] - 0.5):
                    continue
                if boxes:
                    padded = bev_of(np.array(boxes)).copy()
                    padded[:, 2:4] += cfg.margin
                    mine = bev_of(box).copy()
                    mine[2:4] += cfg.margin
                    if np.any(riou_matrix(mine[None], padded) > 0):
                        continue
                boxes.append(box)
                labels.append(tmpl.label)
                break
            else:
                raise RuntimeError("could not place a non-overlapping box; scene too crowded")
    pts = [_surface_points(rng, b, cfg.surface_density) for b in boxes]
    n = cfg.clutter_points
    clutter = np.column_stack([rng.uniform(lo[0], hi[0], n), rng.uniform(lo[1], hi[1], n),
                               cfg.ground_z + rng.uniform(-0.05, 0.05, n),
                               rng.uniform(0.0, 0.3, n)])
    if boxes:
        inside = np.zeros(n, dtype=bool)
        for b in boxes:
            inside |= points_in_box3d(clutter, b)
        clutter = clutter[~inside]
    cloud = crop_to_scene(PointCloud(np.vstack(pts + [clutter])), scene)
    return LabeledScene(cloud, np.array(boxes).reshape(-1, 7), np.array(labels, dtype=int))


def save_scene(directory, stem: str, scene: LabeledScene) -> None:
    d = Path(directory)
    (d / "velodyne").mkdir(parents=True, exist_ok=True)
    (d / "label").mkdir(parents=True, exist_ok=True)
    write_kitti_bin(d / "velodyne" / f"{stem}.bin", scene.cloud)
    (d / "label" / f"{stem}.txt").write_text(format_label_lines(scene.boxes, scene.labels))


def load_scene(directory, stem: str) -> LabeledScene:
    d = Path(directory)
    cloud = read_kitti_bin(d / "velodyne" / f"{stem}.bin")
    boxes, labels, _ = read_label_file(d / "label" / f"{stem}.txt")
    return LabeledScene(cloud, boxes, labels)


def list_scenes(directory) -> list[str]:
    return sorted(p.stem for p in (Path(directory) / "velodyne").glob("*.bin"))

"""Inference, toy training and evaluation entry points."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .detect_head import DetectionSet, ap_40
from .model import HVNet
from .plotting import render_bev_svg
from .pointcloud_io import (CLASS_NAMES, FormatError, LabeledScene, crop_to_scene,
                            format_label_lines, read_kitti_bin, read_label_file)
from .train import DivergenceError, TrainLog, make_toy_scenes, train
from .weights import load_weights, quantize, save_weights

log = logging.getLogger(__name__)

EVAL_THRESHOLDS = (0.5, 0.5, 0.7)  # BEV RIoU per class: Pedestrian, Cyclist, Car


def worker_count() -> int:
    """``HVNET_THREADS`` if set (>= 1), else 1."""
    raw = os.environ.get("HVNET_THREADS", "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"HVNET_THREADS must be an integer, got {raw!r}") from None


def load_model_weights(cfg: ModelConfig, weights_path) -> tuple[HVNet, dict]:
    model = HVNet(cfg)
    store = load_weights(weights_path, model.param_shapes(), cfg.fingerprint())
    return model, store


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

@dataclass
class InferenceReport:
    written: list[Path] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)  # input path -> error


def _infer_one(model: HVNet, store: dict, path: Path, out_dir: Path, plot: bool,
               labels_dir: Path | None) -> list[Path]:
    cloud = crop_to_scene(read_kitti_bin(path), model.cfg.scene)
    dets = model.predict(store, cloud) if cloud.n else DetectionSet()
    label_path = out_dir / f"{path.stem}.txt"
    label_path.write_text(format_label_lines(dets.boxes, dets.labels, dets.scores))
    written = [label_path]
    if plot:
        gt_boxes = gt_labels = None
        if labels_dir is not None and (labels_dir / f"{path.stem}.txt").exists():
            gt_boxes, gt_labels, _ = read_label_file(labels_dir / f"{path.stem}.txt")
        svg = render_bev_svg(model.cfg.scene, cloud.points, gt_boxes, gt_labels,
                             dets.boxes, dets.labels, dets.scores)
        svg_path = out_dir / f"{path.stem}.svg"
        svg_path.write_text(svg)
        written.append(svg_path)
    return written


def run_inference(model: HVNet, store: dict, inputs, out_dir, plot: bool = False,
                  labels_dir=None, threads: int | None = None) -> InferenceReport:
    """Detect objects in every ``.bin`` in ``inputs``; one label file (and SVG) per input.

    A malformed input is logged and recorded in the report; other files continue.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = sorted(Path(p) for p in inputs)
    labels_dir = Path(labels_dir) if labels_dir is not None else None
    threads = worker_count() if threads is None else threads

    def job(p):
        try:
            return p, _infer_one(model, store, p, out_dir, plot, labels_dir), None
        except (FormatError, OSError) as exc:
            return p, [], str(exc)

    if threads > 1 and len(paths) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, paths))
    else:
        results = [job(p) for p in paths]
    report = InferenceReport()
    for p, written, err in results:
        if err is not None:
            log.error("%s", err)
            report.failed[str(p)] = err
        report.written.extend(written)
    return report


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train_toy(cfg: ModelConfig, out_weights, seed: int, epochs: int,
              log_csv=None) -> tuple[dict, TrainLog]:
    """Overfit freshly initialized weights on ``cfg.toy.n_scenes`` synthetic scenes.

    Returns the weights as stored on disk (float32-rounded) and the loss log.
    On divergence the last finite weights are written before re-raising.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    model = HVNet(cfg)
    rng = np.random.default_rng(seed)
    store = model.init_params(rng)
    scenes = make_toy_scenes(cfg, seed)
    try:
        tlog = train(model, store, scenes, epochs)
    except DivergenceError as exc:
        save_weights(out_weights, exc.last_good, cfg.fingerprint())
        raise
    save_weights(out_weights, store, cfg.fingerprint())
    if log_csv is not None:
        Path(log_csv).write_text(tlog.to_csv())
    return quantize(store), tlog


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(model: HVNet, store: dict, scenes: list[LabeledScene],
             thresholds=EVAL_THRESHOLDS) -> dict[str, tuple[float, float]]:
    """Per class ``(iou_threshold, AP_40)``; AP is NaN for classes without ground truth."""
    dets = [model.predict(store, s.cloud) for s in scenes]
    table = {}
    for k, name in enumerate(CLASS_NAMES):
        d = [(x.boxes[x.labels == k], x.scores[x.labels == k]) for x in dets]
        g = [s.boxes[s.labels == k] for s in scenes]
        table[name] = (thresholds[k], ap_40(d, g, thresholds[k]))
    return table


def format_ap_csv(table: dict[str, tuple[float, float]]) -> str:
    lines = ["class,iou_threshold,ap_40"]
    for name, (th, ap) in table.items():
        lines.append(f"{name},{th:.2f},{'N/A' if math.isnan(ap) else f'{ap:.6f}'}")
    return "\n".join(lines) + "\n"

"""Adam with coupled L2 decay, warmup + step schedule, and the toy overfit loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig, OptimizerConfig
from .model import HVNet
from .pointcloud_io import LabeledScene, synth_toy_scene

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, msg, last_good: dict):
        super().__init__(msg)
        self.last_good = last_good


def learning_rate(cfg: OptimizerConfig, iteration: int, epoch: int, total_epochs: int) -> float:
    """Linear warmup from ``warmup_ratio * lr``, then step decay at scaled milestones."""
    lr = cfg.lr
    for m in cfg.milestones:
        if epoch >= math.floor(m / cfg.reference_epochs * total_epochs):
            lr *= cfg.decay
    if iteration < cfg.warmup_iters:
        k = iteration / cfg.warmup_iters
        lr *= cfg.warmup_ratio + (1 - cfg.warmup_ratio) * k
    return lr


class Adam:
    def __init__(self, cfg: OptimizerConfig):
        self.cfg = cfg
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, store: dict, grads: dict, lr: float) -> None:
        b1, b2 = self.cfg.betas
        self.t += 1
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for name in sorted(store):
            g = grads.get(name)
            if g is None:
                continue
            p = store[name]
            if self.cfg.weight_decay:
                g = g + self.cfg.weight_decay * p
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.cfg.eps)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (epoch, lr, total, loc, cls, h, n_pos)

    def to_csv(self) -> str:
        lines = ["epoch,lr,total,loc,cls,h,n_pos"]
        for r in self.rows:
            lines.append(f"{r[0]},{r[1]:.6e},{r[2]:.8f},{r[3]:.8f},{r[4]:.8f},{r[5]:.8f},{r[6]}")
        return "\n".join(lines) + "\n"

    @property
    def totals(self) -> list[float]:
        return [r[2] for r in self.rows]


def make_toy_scenes(cfg: ModelConfig, seed: int) -> list[LabeledScene]:
    rng = np.random.default_rng(seed)
    return [synth_toy_scene(rng, cfg.scene, cfg.toy.scene) for _ in range(cfg.toy.n_scenes)]


def train(model: HVNet, store: dict, scenes: list[LabeledScene], epochs: int,
          on_epoch=None) -> TrainLog:
    """Optimize ``store`` in place on fixed scenes; epoch row = mean loss over scenes.

    Row ``0`` is the loss before any update; row ``e`` the mean loss seen during epoch ``e``.
    """
    cfg = model.cfg.optimizer
    opt = Adam(cfg)
    assignments = [model.assign(s) for s in scenes]
    tlog = TrainLog()
    last_good = {k: v.copy() for k, v in store.items()}
    it = 0
    for epoch in range(epochs + 1):
        sums = np.zeros(4)
        n_pos = 0
        lr = learning_rate(cfg, it, max(epoch - 1, 0), epochs)
        for scene, asg in zip(scenes, assignments):
            loss, grads = model.loss_and_grads(store, scene.cloud, asg)
            if not math.isfinite(loss.total):
                raise DivergenceError(f"loss became {loss.total} at epoch {epoch}", last_good)
            sums += (loss.total, loss.loc, loss.cls, loss.h)
            n_pos += loss.n_pos
            if epoch == 0:
                continue
            lr = learning_rate(cfg, it, epoch - 1, epochs)
            opt.step(store, grads, lr)
            it += 1
        mean = sums / max(len(scenes), 1)
        tlog.rows.append((epoch, lr, *mean, n_pos))
        if epoch:
            last_good = {k: v.copy() for k, v in store.items()}
        if on_epoch is not None:
            on_epoch(epoch, tlog.rows[-1])
    return tlog

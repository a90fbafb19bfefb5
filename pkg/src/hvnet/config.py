"""Model configuration: dataclasses with strict JSON loading."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass
from pathlib import Path

from .backbone import BackboneConfig
from .detect_head import AnchorConfig, DecodeConfig, LossConfig
from .hvfe import HvfeConfig
from .pointcloud_io import SceneSpec, ToySceneConfig
from .voxel_index import VoxelGridSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 2e-4
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_iters: int = 300
    warmup_ratio: float = 1.0 / 3.0
    decay: float = 0.1
    milestones: tuple[int, ...] = (40, 60)
    reference_epochs: int = 70  # milestones are fractions of this many epochs


@dataclass(frozen=True)
class ToyTrainConfig:
    n_scenes: int = 3
    scene: ToySceneConfig = ToySceneConfig()


@dataclass(frozen=True)
class ModelConfig:
    scene: SceneSpec = SceneSpec()
    voxel_size: tuple[float, float] = (0.2, 0.2)
    scales_t: tuple[float, ...] = (0.5, 1.0, 2.0)
    scales_r: tuple[float, ...] = (1.0, 2.0, 4.0)
    q: int = 64
    n_h: int = 128
    normalize_inputs: bool = True
    rectify_after_multiply: bool = True
    backbone: BackboneConfig = BackboneConfig()
    anchors: AnchorConfig = AnchorConfig()
    loss: LossConfig = LossConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    decode: DecodeConfig = DecodeConfig()
    toy: ToyTrainConfig = ToyTrainConfig()
    cls_prior: float = 0.01

    def __post_init__(self):
        if not self.scales_t or not self.scales_r:
            raise ConfigError("scales_t and scales_r must be non-empty")
        rs = sorted(self.scales_r)
        for a, b in zip(rs, rs[1:]):
            if abs(b - 2 * a) > 1e-12:
                raise ConfigError(f"projection scales must double: {rs}")
        if len(rs) > self.backbone.n_blocks:
            raise ConfigError("more projection scales than backbone blocks")
        for s in sorted(set(self.scales_t) | set(self.scales_r)):
            grid = self.grid(s)
            if not grid.is_exact():
                raise ConfigError(f"scale {s} does not tile the scene exactly")
        n_l, n_w = self.grid(rs[0]).n_L, self.grid(rs[0]).n_W
        f = 2 ** (self.backbone.n_blocks - 1)
        if n_l % f or n_w % f:
            raise ConfigError(f"base resolution {(n_l, n_w)} not divisible by {f}")
        n_cls = len(self.anchors.sizes)
        if self.backbone.n_classes != n_cls or len(self.loss.alpha) != n_cls:
            raise ConfigError("class count differs between backbone, anchors and loss")

    def grid(self, scale: float = 1.0) -> VoxelGridSpec:
        return VoxelGridSpec(self.scene, self.voxel_size[0], self.voxel_size[1], scale)

    @property
    def hvfe(self) -> HvfeConfig:
        return HvfeConfig(self.q, self.n_h, tuple(sorted(self.scales_t)),
                          tuple(sorted(self.scales_r)), 4, self.normalize_inputs,
                          self.rectify_after_multiply)

    def fingerprint(self) -> str:
        """Hash of everything that determines parameter meaning."""
        d = to_dict(self)
        arch = {k: d[k] for k in ("scene", "voxel_size", "scales_t", "scales_r", "q", "n_h",
                                  "normalize_inputs", "rectify_after_multiply", "backbone",
                                  "anchors")}
        blob = json.dumps(arch, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def desk_config() -> ModelConfig:
    """Small config used by tests and the toy overfit run."""
    return ModelConfig(
        scene=SceneSpec((0.0, -9.6, -3.0), (19.2, 9.6, 2.0)),
        voxel_size=(0.2, 0.2),
        q=8,
        n_h=16,
        backbone=BackboneConfig(channels=(8, 16, 32), convs_per_block=3, ffpn_width=8,
                                pyramid_channels=16, pyramid_convs=2),
        optimizer=OptimizerConfig(lr=3e-3, warmup_iters=30),
    )


# ---------------------------------------------------------------------------
# dict <-> dataclass
# ---------------------------------------------------------------------------

def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [to_dict(v) for v in obj]
    return obj


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if origin is typing.Union or str(origin) == "types.UnionType":
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    return value


def from_dict(cls, data, path: str = "config"):
    """Build dataclass ``cls`` from ``data``; unknown keys are rejected."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    kwargs = {k: _convert(hints[k], v, f"{path}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_config(path) -> ModelConfig:
    return from_dict(ModelConfig, json.loads(Path(path).read_text()))


def save_config(path, cfg: ModelConfig) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")


__all__ = ["ModelConfig", "OptimizerConfig", "ToyTrainConfig", "ConfigError", "desk_config",
           "load_config", "save_config", "from_dict", "to_dict"]

"""Hybrid-voxel BEV LiDAR detector in plain numpy with hand-written backward passes."""

from .config import ConfigError, ModelConfig, desk_config, load_config, save_config
from .model import HVNet
from .pipeline import evaluate, run_inference, train_toy
from .pointcloud_io import CLASS_NAMES, FormatError, LabeledScene, PointCloud, SceneSpec
from .weights import ArchiveError, load_weights, save_weights

__version__ = "0.1.0"

__all__ = ["ArchiveError", "CLASS_NAMES", "ConfigError", "FormatError", "HVNet", "LabeledScene",
           "ModelConfig", "PointCloud", "SceneSpec", "desk_config", "evaluate", "load_config",
           "load_weights", "run_inference", "save_config", "save_weights", "train_toy"]

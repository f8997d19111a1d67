"""Bicycle trajectory forecasting with physics and social context."""
from .config import Config, load_config
from .data import Scene, SampleWindow, Trajectory, load_trajectories, split_folds, window_scenes, write_trajectories
from .harness import Checkpoint, MetricsTable, build_dataset, evaluate, run_ablation, train
from .model import GATsBi, build_model, featurize
from .synthetic import generate_dataset, generate_synthetic_track

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "Config", "GATsBi", "MetricsTable", "SampleWindow", "Scene", "Trajectory",
    "build_dataset", "build_model", "evaluate", "featurize", "generate_dataset", "generate_synthetic_track",
    "load_config", "load_trajectories", "run_ablation", "split_folds", "train", "window_scenes",
    "write_trajectories",
]

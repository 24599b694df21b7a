"""Multi-city next-location prediction with a dual-tower mixture-of-experts model."""

from .data import MultiCityCorpus, Trajectory, load_corpus
from .geo import CityGeometry, LocationTable
from .model import DualTower, ModelConfig
from .train import TrainConfig, load_checkpoint, save_checkpoint, train_loop

__version__ = "0.1.0"

__all__ = [
    "CityGeometry", "DualTower", "LocationTable", "ModelConfig", "MultiCityCorpus",
    "TrainConfig", "Trajectory", "load_checkpoint", "load_corpus", "save_checkpoint",
    "train_loop",
]

from .model import (
    Detection,
    DetectionSet,
    DetectorConfig,
    LossSpec,
    MiniDetector,
    load_mini_detector,
    nms,
    save_mini_detector,
)
from .adapter import DifferentiableDetector, FasterRCNNAdapter
from .train import TrainConfig, train_mini_detector

__all__ = [
    "Detection",
    "DetectionSet",
    "DetectorConfig",
    "DifferentiableDetector",
    "FasterRCNNAdapter",
    "LossSpec",
    "MiniDetector",
    "TrainConfig",
    "load_mini_detector",
    "nms",
    "save_mini_detector",
    "train_mini_detector",
]

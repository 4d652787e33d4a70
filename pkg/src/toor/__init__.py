"""Semi-supervised learning under class mismatch with transferable OOD recycling."""
from .estimator import TOORClassifier
from .trainer import TrainConfig, TrainReport, run

__all__ = ["TOORClassifier", "TrainConfig", "TrainReport", "run"]
__version__ = "0.1.0"

"""LSTM-based system identification with fine-tuning and layer-freezing transfer."""

from . import bench, data, dynsys, experiments, nn, transfer

__version__ = "0.1.0"

__all__ = ["bench", "data", "dynsys", "experiments", "nn", "transfer"]

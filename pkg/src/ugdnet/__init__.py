"""Uncertainty-gated deformable hybrid CNN-Transformer segmentation network."""

from .config import RunConfig
from .losses import LossWeights, total_loss
from .network import NetworkConfig, NetworkOutput, UGDNet, predict
from .trainer import TrainConfig, train

__all__ = ["LossWeights", "NetworkConfig", "NetworkOutput", "RunConfig", "TrainConfig", "UGDNet", "predict",
           "total_loss", "train"]
__version__ = "0.1.0"

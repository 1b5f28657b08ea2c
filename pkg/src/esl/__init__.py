"""Noise-robust representation learning with evolving sub-centers."""

from .estimator import EvolvingSubcentersClassifier
from .evolution import EvolutionConfig, LabelMap
from .margin_loss import MarginConfig, SubCenterBank
from .synth import Dataset, NkcClassSpec, classify_noise_cell, generate_dataset
from .trainer import TrainConfig, TrainState, train

__all__ = [
    "Dataset",
    "EvolutionConfig",
    "EvolvingSubcentersClassifier",
    "LabelMap",
    "MarginConfig",
    "NkcClassSpec",
    "SubCenterBank",
    "TrainConfig",
    "TrainState",
    "classify_noise_cell",
    "generate_dataset",
    "train",
]

__version__ = "0.1.0"

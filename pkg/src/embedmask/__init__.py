"""Reasoning segmentation with a ``<SEG>`` token whose hidden state is decoded into a mask."""
from .datamodel import BinaryMask, DatasetError, DatasetSplit, Image, Sample, load_dataset, save_dataset
from .estimator import ReasoningSegmenter
from .losses import LossWeights
from .metrics import EvalReport, evaluate, random_mask_baseline
from .model import ModelConfig, Prediction, SegmentationModel, build_model
from .trainer import TrainConfig, load_checkpoint, run_training, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "BinaryMask",
    "DatasetError",
    "DatasetSplit",
    "EvalReport",
    "Image",
    "LossWeights",
    "ModelConfig",
    "Prediction",
    "ReasoningSegmenter",
    "Sample",
    "SegmentationModel",
    "TrainConfig",
    "build_model",
    "evaluate",
    "load_checkpoint",
    "load_dataset",
    "random_mask_baseline",
    "run_training",
    "save_checkpoint",
    "save_dataset",
]

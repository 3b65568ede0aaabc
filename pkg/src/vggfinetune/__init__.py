"""Transfer learning with fine-tuned VGG-16/VGG-19 classifier heads, on numpy."""

__version__ = "0.1.0"

from .data import AugmentConfig, DatasetSplit, LabeledSample, load_dataset, stratified_split
from .metrics import ConfusionMatrix, MetricsReport, classification_metrics, confusion_matrix
from .model import (
    ModelGraph,
    WeightStore,
    attach_finetune_head,
    build_vgg16,
    build_vgg19,
    forward_pass,
    freeze_features,
    init_weights,
    param_count,
)
from .training import TrainConfig, adam_step, evaluate, fit
from .weightfile import load_weights, save_weights

__all__ = [
    "AugmentConfig", "ConfusionMatrix", "DatasetSplit", "LabeledSample", "MetricsReport", "ModelGraph",
    "TrainConfig", "WeightStore", "adam_step", "attach_finetune_head", "build_vgg16", "build_vgg19",
    "classification_metrics", "confusion_matrix", "evaluate", "fit", "forward_pass", "freeze_features",
    "init_weights", "load_dataset", "load_weights", "param_count", "save_weights", "stratified_split",
]

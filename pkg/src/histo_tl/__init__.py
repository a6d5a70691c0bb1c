"""Transfer-learning workbench for osteosarcoma histology tile classification."""

from .data_manifest import (
    TASKS,
    ClassLabel,
    DatasetManifest,
    SplitAssignment,
    TaskSpec,
    TileRecord,
    derive_task,
    load_manifest,
    split_dataset,
)
from .estimator import TileAugmenter, TilePreprocessor, TransferLearningClassifier
from .metrics import confusion, report, roc, tumor_type_aggregate
from .model_zoo import ModelConfig, ModelHandle, build_model, load_checkpoint, save_checkpoint
from .pipeline import AugmentConfig, augment, make_batch_stream, preprocess
from .trainer import TrainConfig, TrainRunRecord, predict, select_loss, train

__version__ = "0.1.0"

__all__ = [
    "TASKS",
    "AugmentConfig",
    "ClassLabel",
    "DatasetManifest",
    "ModelConfig",
    "ModelHandle",
    "SplitAssignment",
    "TaskSpec",
    "TileAugmenter",
    "TilePreprocessor",
    "TileRecord",
    "TrainConfig",
    "TrainRunRecord",
    "TransferLearningClassifier",
    "augment",
    "build_model",
    "confusion",
    "derive_task",
    "load_checkpoint",
    "load_manifest",
    "make_batch_stream",
    "predict",
    "preprocess",
    "report",
    "roc",
    "save_checkpoint",
    "select_loss",
    "split_dataset",
    "train",
    "tumor_type_aggregate",
]

"""voxcnn: a self-contained 3D CNN engine for volumetric CT classification.

Pure numpy forward/backward passes for every layer, seeded augmentation,
cubic-spline volume resampling, the full training protocol (RAdam or SGD
with momentum, plateau scheduling, early stopping, macro-F1 monitoring),
and binary formats for volumes (MIAV) and checkpoints (MIAC).
"""

from .augment import AugmentConfig, apply_pipeline, sample_plan
from .checkpoint import load_checkpoint, model_from_checkpoint, save_checkpoint
from .config import TrainConfig, parse_config_file, parse_config_text
from .losses import class_weights_from_counts, total_loss, weighted_cce
from .metrics import EvalReport, confusion_matrix, macro_f1
from .model import (Model, ModelSpec, build_detection_model,
                    build_severity_model, detection_spec, severity_spec)
from .optim import EarlyStopper, PlateauScheduler, RAdam, SgdMomentum
from .rng import Rng
from .synth import generate_synthetic_dataset
from .trainer import RunLog, evaluate, predict, train
from .volume import (DatasetIndex, Volume, load_slice_stack, read_index,
                     read_miav, resample_volume, write_miav)

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "apply_pipeline", "sample_plan",
    "load_checkpoint", "model_from_checkpoint", "save_checkpoint",
    "TrainConfig", "parse_config_file", "parse_config_text",
    "class_weights_from_counts", "total_loss", "weighted_cce",
    "EvalReport", "confusion_matrix", "macro_f1",
    "Model", "ModelSpec", "build_detection_model", "build_severity_model",
    "detection_spec", "severity_spec",
    "EarlyStopper", "PlateauScheduler", "RAdam", "SgdMomentum",
    "Rng",
    "generate_synthetic_dataset",
    "RunLog", "evaluate", "predict", "train",
    "DatasetIndex", "Volume", "load_slice_stack", "read_index",
    "read_miav", "resample_volume", "write_miav",
]

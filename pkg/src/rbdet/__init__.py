"""Desk-scale CPU object detector.

Multi-branch blocks that merge into single convolutions for deployment,
a bidirectional-fusion neck, anchor-aided training, task-aligned label
assignment, distribution-based box regression, and self-distillation,
all on a minimal reverse-mode autodiff engine.
"""

from .assign import GroundTruth
from .data import (Dataset, Sample, augment, gen_synthetic, letterbox,
                   load_coco_json, load_dataset_dir, read_ppm, save_dataset,
                   write_ppm)
from .deploy import (Detection, benchmark, decode, fuse_model, infer,
                     load_deploy_model, nms)
from .errors import (CheckpointError, DataError, FusionError, NumericError,
                     RbdetError, TensorError)
from .evaluate import EvalReport, evaluate_ap
from .losses import DetectionObjective, cosine_alpha, kd_loss, total_loss
from .network import (HeadBranches, HeadOutputs, Model, ModelConfig,
                      build_model, strip_auxiliary)
from .tensor import Tensor, load_tensor, no_grad, save_tensor
from .trainer import (Checkpoint, EpochStats, TrainConfig, dld_train,
                      load_checkpoint, resume, save_checkpoint, self_distill,
                      train)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "CheckpointError", "DataError", "Dataset", "Detection",
    "DetectionObjective", "EpochStats", "EvalReport", "FusionError",
    "GroundTruth", "HeadBranches", "HeadOutputs", "Model", "ModelConfig",
    "NumericError", "RbdetError", "Sample", "Tensor", "TensorError",
    "TrainConfig", "augment", "benchmark", "build_model", "cosine_alpha",
    "decode", "dld_train", "evaluate_ap", "fuse_model", "gen_synthetic",
    "infer", "kd_loss", "letterbox", "load_checkpoint", "load_coco_json",
    "load_dataset_dir", "load_deploy_model", "load_tensor", "nms", "no_grad",
    "read_ppm", "resume", "save_checkpoint", "save_dataset", "save_tensor",
    "self_distill", "strip_auxiliary", "total_loss", "train", "write_ppm",
]

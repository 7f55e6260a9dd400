"""Compact gaze estimation for edge devices.

A numpy-only stack: a small reverse-mode autodiff core, ConvNeXt-style
teacher/student gaze models, masked-reconstruction distillation, adapter
fine-tuning (generalized + 5-shot personalized), gaze-directed detection
filtering, a latency benchmark, and a synthetic eye-image generator that
makes the whole pipeline verifiable on a laptop.
"""

from .bench import LatencyReport, compare, measure_latency
from .dataio import (
    GazeDataset,
    GazeSample,
    load_dataset,
    load_model,
    load_tensors,
    load_weights,
    read_image,
    save_model,
    save_tensors,
    save_weights,
)
from .detect import (
    DetectionBox,
    FeatureGrid,
    detect_at_gaze,
    load_grid,
    nms,
    resolve_edit_region,
    save_grid,
)
from .distill import DistillConfig, distill_run, generate_mask, reconstruction_loss
from .errors import GazekitError
from .gaze_train import (
    PersonalizeConfig,
    ReplaySource,
    TrainConfig,
    angular_error,
    evaluate,
    kmeans_cluster,
    personalize,
    train_generalized,
)
from .models import (
    GazeModel,
    ModelConfig,
    TEACHER_CONFIG,
    attach_adapters,
    build_student_from_teacher,
    build_teacher,
    count_params,
    student_config,
)
from .optim import AdamW
from .synth import SyntheticEyeConfig, synth_generate
from .tensor import Parameter, Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "DetectionBox",
    "DistillConfig",
    "FeatureGrid",
    "GazeDataset",
    "GazeModel",
    "GazeSample",
    "GazekitError",
    "LatencyReport",
    "ModelConfig",
    "Parameter",
    "PersonalizeConfig",
    "ReplaySource",
    "SyntheticEyeConfig",
    "TEACHER_CONFIG",
    "Tensor",
    "TrainConfig",
    "angular_error",
    "attach_adapters",
    "build_student_from_teacher",
    "build_teacher",
    "compare",
    "count_params",
    "detect_at_gaze",
    "distill_run",
    "evaluate",
    "generate_mask",
    "kmeans_cluster",
    "load_dataset",
    "load_grid",
    "load_model",
    "load_tensors",
    "load_weights",
    "measure_latency",
    "nms",
    "no_grad",
    "personalize",
    "read_image",
    "reconstruction_loss",
    "resolve_edit_region",
    "save_grid",
    "save_model",
    "save_tensors",
    "save_weights",
    "student_config",
    "synth_generate",
    "train_generalized",
    "__version__",
]

"""Framework-free vision transformer for binary plant-stress classification.

Modules cover the full pipeline: dense tensors with reverse-mode autodiff
(``autodiff``), the transformer itself (``vit``), attention-map rendering
(``attention_maps``), a kernel SVM over extracted features (``svm``),
synthetic data and annotation handling (``data``), metrics (``metrics``),
the training/evaluation harness (``training``) and the command-line
interface (``cli``).
"""

from .autodiff import OptimizerConfig, Parameter, Tape, Tensor, backward, optimizer_step
from .data import AnnotatedImage, Box, SynthConfig, Window, synthesize_field_image
from .metrics import ConfusionMatrix, EvalReport, auc, classification_metrics, roc_curve
from .svm import KernelSpec, SvmModel, SvmTrainConfig
from .training import PlateauController, ScenarioConfig, TrainLog, bce_loss, run_training
from .vit import AttentionRecord, FreezeSpec, ViTConfig, ViTModel, vit_forward

__version__ = "0.1.0"

__all__ = [
    "AnnotatedImage", "AttentionRecord", "Box", "ConfusionMatrix", "EvalReport",
    "FreezeSpec", "KernelSpec", "OptimizerConfig", "Parameter", "PlateauController",
    "ScenarioConfig", "SvmModel", "SvmTrainConfig", "SynthConfig", "Tape", "Tensor",
    "TrainLog", "ViTConfig", "ViTModel", "Window", "auc", "backward", "bce_loss",
    "classification_metrics", "optimizer_step", "roc_curve", "run_training",
    "synthesize_field_image", "vit_forward",
]

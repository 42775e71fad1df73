"""Desk-scale forgery localization and detection.

Submodules: ``domain`` (types and file formats), ``nn`` (layers, gradient
check, checkpoints), ``encoders``, ``flexpert`` (localization expert),
``bridge`` (mask tokens and verdicts), ``datagen`` (synthetic forgeries),
``metrics``, ``experiments`` and ``cli``.
"""

from .bridge import MaskBridge, detect, render_explanation, train_bridge
from .datagen import ROBUSTNESS_LADDER, build_dataset, synthesize, verify_rebuild
from .domain import (
    BinaryMask,
    DatasetManifest,
    DistortionSpec,
    ManifestEntry,
    RasterImage,
    ScoreMap,
    ToyConfig,
    load_image,
    load_mask,
    validate_manifest,
)
from .errors import FGLError
from .flexpert import FLExpert, dice_loss, flexpert_forward, train_flexpert
from .metrics import image_accuracy, pixel_auc, pixel_f1, rouge
from .nn import grad_check

__version__ = "0.1.0"

__all__ = [
    "BinaryMask",
    "DatasetManifest",
    "DistortionSpec",
    "FGLError",
    "FLExpert",
    "ManifestEntry",
    "MaskBridge",
    "ROBUSTNESS_LADDER",
    "RasterImage",
    "ScoreMap",
    "ToyConfig",
    "build_dataset",
    "detect",
    "dice_loss",
    "flexpert_forward",
    "grad_check",
    "image_accuracy",
    "load_image",
    "load_mask",
    "pixel_auc",
    "pixel_f1",
    "render_explanation",
    "rouge",
    "synthesize",
    "train_bridge",
    "train_flexpert",
    "validate_manifest",
    "verify_rebuild",
]

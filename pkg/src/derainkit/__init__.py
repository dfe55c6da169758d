"""derainkit: per-pixel predictive filtering for single-image deraining.

A self-contained engine: a minimal reverse-mode tensor core, per-pixel
(dilated, weight-sharing multi-scale) filtering operators, an
uncertainty-guided two-stage model, geometric mix augmentation for rain
layers and backgrounds, and a toy training/benchmark pipeline with a CLI.
"""

from .autograd import Tape, Tensor, parameter
from .filtering import (
    apply_kernel_field,
    averaging_fusion,
    count_macs,
    dilate_kernel_field,
    filtering_macs,
    fuse,
    uncertainty_map,
)
from .losses import LossConfig, cascade_loss, l1_ssim_loss, psnr, ssim_index
from .networks import (
    CascadeModel,
    ModelConfig,
    NetConfig,
    PredictiveNet,
    SingleStageModel,
)

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "parameter",
    "apply_kernel_field",
    "averaging_fusion",
    "count_macs",
    "dilate_kernel_field",
    "filtering_macs",
    "fuse",
    "uncertainty_map",
    "LossConfig",
    "cascade_loss",
    "l1_ssim_loss",
    "psnr",
    "ssim_index",
    "CascadeModel",
    "ModelConfig",
    "NetConfig",
    "PredictiveNet",
    "SingleStageModel",
    "__version__",
]

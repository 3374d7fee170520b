"""Multi-modal volumetric segmentation at desk scale.

Per-modality pooling-transformer encoders, a nested attention fusion
bottleneck, modality-gated skip connections, and a full training and
evaluation stack on synthetic phantom data.
"""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward, grad_check
from .model import (
    Model,
    ModelConfig,
    attention_cost,
    benchmark_attention,
    load_checkpoint,
    save_checkpoint,
)

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "grad_check",
    "Model",
    "ModelConfig",
    "attention_cost",
    "benchmark_attention",
    "load_checkpoint",
    "save_checkpoint",
    "__version__",
]

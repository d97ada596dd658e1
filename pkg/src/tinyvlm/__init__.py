"""tinyvlm: a desk-scale vision-language training laboratory.

Selective-layer fine-tuning ("visual region" placement and scale), layer
importance metrics, layer reversion and region-constrained pruning, all on
a fully synthetic multimodal benchmark with a deterministic f64 training
stack (analytic backward pass, compiled kernels with a numpy fallback).
"""

from .config import ModelConfig
from .checkpoint import Checkpoint, init_checkpoint, load_checkpoint, save_checkpoint
from .data import TaskInstance, Vocabulary
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "Checkpoint", "init_checkpoint", "load_checkpoint",
    "save_checkpoint", "TaskInstance", "Vocabulary", "KERNEL_BACKEND",
    "__version__",
]

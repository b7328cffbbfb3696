"""Invertible hierarchy-flow harmonization of multi-site images.

Pure numpy autodiff core with numba hot kernels, a fixed convolutional
artefact encoder, the invertible flow with artefact-aware normalization,
training losses, a synthetic multi-site dataset and evaluation metrics.
"""

from ._kernels import get_backend, set_backend
from .encoder import FixedEncoder, artefact_embedding, template_embedding
from .flow import FlowConfig, FlowParams, harmonize, init_params, model_forward, model_reverse
from .losses import LossWeights, anatomical_consistency, artefact_consistency, total_loss
from .tensor import NonFiniteError, ShapeError, Tape, Tensor, backward
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "FixedEncoder", "FlowConfig", "FlowParams", "LossWeights", "NonFiniteError",
    "ShapeError", "Tape", "Tensor", "TrainConfig", "anatomical_consistency", "artefact_consistency",
    "artefact_embedding", "backward", "get_backend", "harmonize", "init_params", "load_checkpoint",
    "model_forward", "model_reverse", "save_checkpoint", "set_backend", "template_embedding",
    "total_loss", "train",
]

"""modalrep: conditional diffusion via a trainable modal copy of a frozen
base network, reparameterized into a single branch for inference."""

from . import (accounting, baseline_controlnet, checkpoint, cli, nn_layers,
               pgm, reparam, tensor_core, toy_diffusion, unet)
from .reparam import FusionConfig, fuse_layer, fuse_model, verify_equivalence
from .tensor_core import GradTape, Tensor, backward, finite_diff_grad
from .toy_diffusion import DiffusionConfig, make_synthetic_pair, pretrain_base, sample
from .unet import ModelGraph, UNetConfig, build_base_model, make_dual_model, model_forward

__version__ = "0.1.0"

__all__ = [
    "accounting", "baseline_controlnet", "checkpoint", "cli", "nn_layers",
    "pgm", "reparam", "tensor_core", "toy_diffusion", "unet",
    "FusionConfig", "fuse_layer", "fuse_model", "verify_equivalence",
    "GradTape", "Tensor", "backward", "finite_diff_grad",
    "DiffusionConfig", "make_synthetic_pair", "pretrain_base", "sample",
    "ModelGraph", "UNetConfig", "build_base_model", "make_dual_model",
    "model_forward", "__version__",
]

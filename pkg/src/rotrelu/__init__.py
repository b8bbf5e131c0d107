"""Rotated ReLU: per-channel trainable-slope rectifiers with structured pruning and cost accounting."""

from .layers import canonicalize, rrelu, rrelu_backward, rrelu_forward, rrelu_general_forward
from .models import Model, ModelSpec, LayerDef, build_fcnn, build_resnet, build_wrn, load_checkpoint, save_checkpoint
from .init import init_type1, init_type2, kaiming_init, sample_truncated_gmm
from .pruning import PruneMask, apply_mask_zero, compact, derive_mask, select_gamma, verify_equivalence
from .training import TrainConfig, evaluate, train, train_slopes_only, two_step_coarse

__version__ = "0.1.0"

__all__ = [
    "canonicalize", "rrelu", "rrelu_backward", "rrelu_forward", "rrelu_general_forward",
    "Model", "ModelSpec", "LayerDef", "build_fcnn", "build_resnet", "build_wrn",
    "load_checkpoint", "save_checkpoint",
    "init_type1", "init_type2", "kaiming_init", "sample_truncated_gmm",
    "PruneMask", "apply_mask_zero", "compact", "derive_mask", "select_gamma", "verify_equivalence",
    "TrainConfig", "evaluate", "train", "train_slopes_only", "two_step_coarse",
]

"""Small reverse-mode autodiff engine with the layers the classifiers need."""
from . import functional
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradCheckResult, gradcheck
from .layers import Conv1d, Conv2d, Dropout, Linear, Module, kaiming_uniform
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, as_tensor, concat, no_grad

__all__ = [
    "Adam", "AdamState", "Conv1d", "Conv2d", "Dropout", "GradCheckResult", "Linear", "Module",
    "Tensor", "adam_step", "as_tensor", "concat", "functional", "gradcheck", "kaiming_uniform",
    "load_checkpoint", "no_grad", "save_checkpoint",
]

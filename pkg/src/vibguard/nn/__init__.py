"""Small reverse-mode autodiff engine and layers."""

from . import functional
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check, module_grad_check
from .layers import Conv1d, ConvTranspose1d, InstanceNorm, Lambda, Linear, Module, Sequential, assert_frozen, param
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, concat, grad_enabled, matmul, no_grad, pad_last, stack, tensor, where

__all__ = [
    "Adam", "AdamState", "Conv1d", "ConvTranspose1d", "GradCheckReport", "InstanceNorm", "Lambda", "Linear",
    "Module", "Sequential", "Tensor", "adam_step", "assert_frozen", "concat", "functional", "grad_check",
    "grad_enabled", "load_checkpoint", "matmul", "module_grad_check", "no_grad", "pad_last", "param",
    "save_checkpoint", "stack", "tensor", "where",
]

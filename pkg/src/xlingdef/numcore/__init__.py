"""Minimal f64 autodiff: tape tensors, ops, Adam, checks, checkpoints."""

from . import kernels, ops
from .adam import AdamState, adam_step, clip_global_norm
from .checkpoint import load_checkpoint, restore_into, save_checkpoint
from .gradcheck import GradCheckReport, grad_check
from .tensor import Graph, GraphConsumedError, Tensor, backward

__all__ = [
    "AdamState", "Graph", "GraphConsumedError", "GradCheckReport", "Tensor",
    "adam_step", "backward", "clip_global_norm", "grad_check", "kernels",
    "load_checkpoint", "ops", "restore_into", "save_checkpoint",
]

"""Minimal reverse-mode automatic differentiation over dense float64 tensors."""
from . import ops
from .attention import (fused_multi_head_attention, multi_head_attention,
                        scaled_dot_product_attention, split_heads)
from .checkpoint import load_checkpoint, params_digest, save_checkpoint
from .optim import Adam, adam_step
from .tensor import Tape, Tensor, active_tape, as_tensor

__all__ = [
    "Adam", "Tape", "Tensor", "active_tape", "adam_step", "as_tensor", "fused_multi_head_attention",
    "load_checkpoint", "multi_head_attention", "ops", "params_digest", "save_checkpoint",
    "scaled_dot_product_attention", "split_heads",
]

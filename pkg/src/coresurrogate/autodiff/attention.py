"""Scaled dot-product and multi-head attention built from the tape primitives."""
from __future__ import annotations

import math
from typing import Sequence

from ..errors import ConfigError, ShapeError
from . import ops
from .tensor import Tensor, as_tensor


def scaled_dot_product_attention(q, k, v) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V for Q (b, s_q, d_k), K (b, s_k, d_k), V (b, s_k, d_v)."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError(f"attention expects 3-axis tensors, got Q {q.shape}, K {k.shape}, V {v.shape}")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: key width of Q {q.shape} and K {k.shape} differ")
    if k.shape[:2] != v.shape[:2] or q.shape[0] != k.shape[0]:
        raise ShapeError(f"attention: Q {q.shape}, K {k.shape}, V {v.shape} do not align")
    scores = ops.scale(ops.matmul(q, ops.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    return ops.matmul(ops.softmax(scores, axis=-1), v)


def multi_head_attention(q, k, v, heads: int, w_q: Sequence, w_k: Sequence, w_v: Sequence,
                         w_o) -> Tensor:
    """Concatenate ``heads`` attention heads and project with ``w_o``.

    Args:
        q, k, v: (b, s_q, d_model), (b, s_k, d_model), (b, s_k, d_model).
        heads: number of heads h; d_model must be divisible by h.
        w_q, w_k, w_v: per-head projection matrices, each (d_model, d_model / h).
        w_o: output projection, (d_model, d_model).
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d_model = q.shape[-1]
    if heads < 1 or d_model % heads:
        raise ConfigError(f"d_model={d_model} is not divisible by heads={heads}")
    if not len(w_q) == len(w_k) == len(w_v) == heads:
        raise ConfigError(f"expected {heads} projections per role")
    outs = [scaled_dot_product_attention(ops.matmul(q, w_q[i]), ops.matmul(k, w_k[i]),
                                         ops.matmul(v, w_v[i]))
            for i in range(heads)]
    joined = outs[0] if heads == 1 else ops.concat(outs, axis=-1)
    return ops.matmul(joined, w_o)


def split_heads(w, heads: int) -> list:
    """Column blocks of a fused (d_model, d_model) projection, one per head."""
    w = as_tensor(w)
    d = w.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigError(f"d_model={d} is not divisible by heads={heads}")
    dh = d // heads
    return [ops.getitem(w, (slice(None), slice(i * dh, (i + 1) * dh))) for i in range(heads)]


def fused_multi_head_attention(x_q, x_kv, heads: int, w_q, w_k, w_v, w_o) -> Tensor:
    """Multi-head attention with fused (d_model, d_model) projections.

    Head ``i`` uses columns ``i*d_h:(i+1)*d_h`` of each projection, which makes
    this identical to :func:`multi_head_attention` with the split weights.
    """
    x_q, x_kv = as_tensor(x_q), as_tensor(x_kv)
    d = as_tensor(w_q).shape[-1]
    if heads < 1 or d % heads:
        raise ConfigError(f"d_model={d} is not divisible by heads={heads}")
    dh = d // heads
    q, k, v = ops.matmul(x_q, w_q), ops.matmul(x_kv, w_k), ops.matmul(x_kv, w_v)
    outs = []
    for i in range(heads):
        cols = (slice(None), slice(None), slice(i * dh, (i + 1) * dh))
        outs.append(scaled_dot_product_attention(ops.getitem(q, cols), ops.getitem(k, cols),
                                                 ops.getitem(v, cols)))
    joined = outs[0] if heads == 1 else ops.concat(outs, axis=-1)
    return ops.matmul(joined, w_o)

"""Neural building blocks: attention, layer norm, dropout, position codes.

Everything here composes the differentiable primitives from `tensor`, so
gradients come for free. Masks use the convention True = position is real,
False = padding.
"""

from __future__ import annotations

import numpy as np

from .tensor import (  # noqa: F401  (swish/concat re-exported)
    Tensor,
    concat,
    layer_norm_fused,
    linear,
    scale_add_const,
    softmax,
    swish,
)

__all__ = [
    "MASK_FILL", "positional_encoding", "dense", "attention",
    "multi_head_attention", "layer_norm", "dropout",
]

# Large additive penalty for masked scores. After the max-shift inside
# softmax the exponent is below the float64 underflow threshold, so masked
# attention weights come out as exact 0.0, not merely small.
MASK_FILL = -1e30


def positional_encoding(T: int, d: int) -> np.ndarray:
    """Sinusoidal position table of shape (T, d).

    Even columns carry sin(pos / 10000^(2i/d)), odd columns the matching
    cos. Returned as a plain constant array; it is never trained.
    """
    if d % 2 != 0:
        raise ValueError(f"encoding width must be even, got {d}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d)
    pe = np.empty((T, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def dense(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return linear(x, W, b)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None):
    """Scaled dot-product attention.

    q, k, v: (..., T, d_head). mask: bool, broadcastable to the score shape
    (..., T_q, T_k); True marks keys that may be attended to. Every query
    row must keep at least one key. Returns (output, weights).
    """
    d_head = q.data.shape[-1]
    scores = q @ k.swapaxes(-1, -2)
    inv = 1.0 / np.sqrt(d_head)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.logical_or.reduce(
                np.broadcast_to(mask, scores.data.shape), axis=-1).all():
            raise ValueError("attention mask blocks every key for some query")
        scores = scale_add_const(scores, inv, np.where(mask, 0.0, MASK_FILL))
    else:
        scores = scale_add_const(scores, inv, 0.0)
    weights = softmax(scores, axis=-1)
    return weights @ v, weights


def multi_head_attention(params: dict, x: Tensor, mask: np.ndarray | None = None,
                         n_heads: int = 4) -> Tensor:
    """Self-attention with separate heads and an output projection.

    params holds W_q, b_q, W_k, b_k, W_v, b_v (d_model -> n_heads*d_head)
    and W_o, b_o (n_heads*d_head -> d_model). x is (B, T, d_model); mask is
    an optional (B, T) key-padding mask.
    """
    B, T, _ = x.data.shape
    proj = params["W_q"].data.shape[1]
    if proj % n_heads != 0:
        raise ValueError(f"projection width {proj} not divisible by {n_heads} heads")
    d_head = proj // n_heads

    def split_heads(t: Tensor) -> Tensor:
        return t.reshape(B, T, n_heads, d_head).swapaxes(1, 2)

    q = split_heads(dense(x, params["W_q"], params["b_q"]))
    k = split_heads(dense(x, params["W_k"], params["b_k"]))
    v = split_heads(dense(x, params["W_v"], params["b_v"]))
    att_mask = None
    if mask is not None:
        att_mask = np.asarray(mask, dtype=bool)[:, None, None, :]
    out, _ = attention(q, k, v, att_mask)
    out = out.swapaxes(1, 2).reshape(B, T, proj)
    return dense(out, params["W_o"], params["b_o"])


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    return layer_norm_fused(x, gamma, beta, eps)


def dropout(x: Tensor, rate: float, rng: np.random.Generator,
            training: bool = True) -> Tensor:
    """Inverted dropout: surviving units are rescaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.data.shape) >= rate
    return x * Tensor(keep / (1.0 - rate))

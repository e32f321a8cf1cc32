"""Multi-head attention, single-head dynamic temporal attention, position-wise FFN.

Conventions:

* ``scale_mode="conventional"`` scales scores by ``1/sqrt(d/h)``;
  ``"paper_literal"`` uses ``1/sqrt(d*h)``.  At d=512, h=8 the latter is
  1/64, the same as ``1/d_k``.
* ``mask_mode="pre_softmax_additive"`` adds ``-1e9`` to masked logits;
  ``"post_softmax_multiplicative"`` zeroes masked weights after the softmax
  and renormalises over the visible keys.  Without the renormalisation the
  softmax denominator would still see future keys and break causality.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import Linear, Module, glorot
from .tensor import Tensor

SCALE_MODES = ("conventional", "paper_literal")
MASK_MODES = ("pre_softmax_additive", "post_softmax_multiplicative")
ACTIVATIONS = ("relu", "gelu")
MASK_FILL = -1e9


def make_causal_mask(length: int) -> np.ndarray:
    """Lower-triangular ones: query ``i`` may attend to key ``j <= i``."""
    if length < 1:
        raise ValueError(f"mask length must be >= 1, got {length}")
    return np.tril(np.ones((length, length)))


class MultiHeadAttention(Module):
    """Projections ``w_q, w_k, w_v, w_o`` (each d x d) plus head/scale/mask settings."""

    def __init__(self, d: int, h: int, rng: np.random.Generator,
                 scale_mode: str = "conventional", mask_mode: str = "pre_softmax_additive"):
        if d % h:
            raise ValueError(f"model width {d} is not divisible by {h} heads")
        if scale_mode not in SCALE_MODES:
            raise ValueError(f"unknown scale_mode {scale_mode!r}")
        if mask_mode not in MASK_MODES:
            raise ValueError(f"unknown mask_mode {mask_mode!r}")
        self.d, self.h = d, h
        self.scale_mode, self.mask_mode = scale_mode, mask_mode
        self.w_q = glorot(rng, d, d)
        self.w_k = glorot(rng, d, d)
        self.w_v = glorot(rng, d, d)
        self.w_o = glorot(rng, d, d)

    @property
    def scale(self) -> float:
        if self.scale_mode == "paper_literal":
            return 1.0 / math.sqrt(self.d * self.h)
        return 1.0 / math.sqrt(self.d // self.h)

    def forward(self, q_in: Tensor, kv_in: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        return multi_head_attention(q_in, kv_in, self, mask)


def _split_heads(x: Tensor, h: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, h, d // h).transpose(1, 2)


def multi_head_attention(q_in: Tensor, kv_in: Tensor, params: MultiHeadAttention,
                         mask: Optional[np.ndarray] = None, return_weights: bool = False):
    """Scaled dot-product attention over ``h`` heads followed by ``w_o``.

    ``mask`` holds ones where attention is allowed; its trailing two axes must
    be ``(Lq, Lk)`` and any leading axes broadcast against ``(B, h)``.
    """
    d, h = params.d, params.h
    if q_in.shape[-1] != d or kv_in.shape[-1] != d:
        raise T.ShapeError(f"attention width {d} does not match inputs {q_in.shape}, {kv_in.shape}")
    b, lq, _ = q_in.shape
    lk = kv_in.shape[1]

    # scale applied to the (smaller) query tensor rather than the L x L scores
    q = _split_heads(q_in @ params.w_q, h) * params.scale
    k = _split_heads(kv_in @ params.w_k, h)
    v = _split_heads(kv_in @ params.w_v, h)
    scores = q @ k.transpose(-1, -2)

    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.ndim < 2 or mask.shape[-2:] != (lq, lk):
            raise T.ShapeError(f"mask shape {mask.shape} does not match attention ({lq}, {lk})")
        if not np.isin(mask, (0.0, 1.0)).all():
            raise ValueError("mask entries must be 0 or 1")
        try:
            np.broadcast_shapes(mask.shape, (b, h, lq, lk))
        except ValueError:
            raise T.ShapeError(f"mask shape {mask.shape} does not broadcast to {(b, h, lq, lk)}") from None
        if params.mask_mode == "pre_softmax_additive":
            weights = T.softmax_lastdim(scores + (1.0 - mask) * MASK_FILL)
        else:
            weights = T.masked_softmax_lastdim(scores, mask)
    else:
        weights = T.softmax_lastdim(scores)

    ctx = (weights @ v).transpose(1, 2).reshape(b, lq, d)
    out = ctx @ params.w_o
    return (out, weights) if return_weights else out


class TemporalAttention(Module):
    """Single-head full-width attention with learnable ``wt_q, wt_k, wt_v``."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.d = d
        self.wt_q = glorot(rng, d, d)
        self.wt_k = glorot(rng, d, d)
        self.wt_v = glorot(rng, d, d)

    def forward(self, x: Tensor) -> Tensor:
        return dynamic_temporal_attention(x, self)


def dynamic_temporal_attention(x: Tensor, params: TemporalAttention) -> Tensor:
    """Unscaled ``softmax(Qt Kt^T) Vt`` with Qt, Kt, Vt linear in ``x``."""
    if x.shape[-1] != params.d:
        raise T.ShapeError(f"temporal attention width {params.d} does not match input {x.shape}")
    qt = x @ params.wt_q
    kt = x @ params.wt_k
    vt = x @ params.wt_v
    weights = T.softmax_lastdim(qt @ kt.transpose(-1, -2))
    return weights @ vt


class FeedForward(Module):
    """``w2 act(x w1 + b1) + b2`` applied independently at every position."""

    def __init__(self, d: int, d_ff: int, rng: np.random.Generator, activation: str = "relu"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.lin1 = Linear(d, d_ff, rng)
        self.lin2 = Linear(d_ff, d, rng)
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        return position_wise_ffn(x, self)


def position_wise_ffn(x: Tensor, params: FeedForward) -> Tensor:
    act = T.relu if params.activation == "relu" else T.gelu
    return params.lin2(act(params.lin1(x)))


# parameter-set aliases
MhaParams = MultiHeadAttention
TemporalAttentionParams = TemporalAttention
FfnParams = FeedForward

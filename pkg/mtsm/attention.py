# mtsm/attention.py
"""
Scaled dot-product attention with an optional multiplicative geometric gate.

For one head:
    theta_a = Q K^T / sqrt(d_k)
    theta   = (theta_g + eps_g) * exp(theta_a) / sum over unmasked keys
which is softmax(theta_a + log(theta_g + eps_g)); the gate is applied once,
inside the normalization, never as a second softmax.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from mtsm.errors import DimensionError
from mtsm.tensor import (
    Tensor,
    add,
    concat,
    dropout,
    log,
    matmul,
    scale,
    select,
    softmax_rows,
    transpose,
)


@dataclass(frozen=True)
class HeadParams:
    """Per-head projections plus the shared output map."""
    w_q: Tuple[Tensor, ...]  # each [d_model, d_k]
    w_k: Tuple[Tensor, ...]
    w_v: Tuple[Tensor, ...]
    w_o: Tensor              # [H * d_k, d_model]

    def __post_init__(self):
        heads = len(self.w_q)
        if heads == 0 or len(self.w_k) != heads or len(self.w_v) != heads:
            raise DimensionError("w_q, w_k and w_v need one matrix per head")
        d_k = self.w_q[0].shape[1]
        if self.w_o.shape[0] != heads * d_k:
            raise DimensionError(f"w_o rows {self.w_o.shape[0]} != H * d_k = {heads * d_k}")

    @property
    def heads(self) -> int:
        return len(self.w_q)


@dataclass(frozen=True)
class AttentionWeights:
    theta: np.ndarray  # [H, N_q, N_k], rows sum to 1


def scaled_logits(Q: Tensor, K: Tensor) -> Tensor:
    if Q.ndim != 2 or K.ndim != 2 or Q.shape[1] != K.shape[1]:
        raise DimensionError(f"scaled_logits: d_k mismatch between Q {Q.shape} and K {K.shape}")
    return scale(matmul(Q, transpose(K)), 1.0 / math.sqrt(Q.shape[1]))


def gated_attention_weights(
    theta_a: Tensor,
    theta_g: Optional[Tensor] = None,
    mask=None,
    eps_g: float = 1e-6,
) -> Tensor:
    """Normalized weights for one head; theta_g=None is plain softmax."""
    if theta_g is None:
        return softmax_rows(theta_a, mask)
    if theta_g.shape != theta_a.shape:
        raise DimensionError(f"gate {theta_g.shape} does not match logits {theta_a.shape}")
    return softmax_rows(add(theta_a, log(add(theta_g, eps_g))), mask)


def multi_head_attention(
    x_q: Tensor,
    x_kv: Tensor,
    params: HeadParams,
    theta_g: Optional[Tensor] = None,
    mask=None,
    eps_g: float = 1e-6,
    dropout_rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    weights_out: Optional[List[np.ndarray]] = None,
) -> Tensor:
    """
    Project, weight and recombine per head, then apply w_o.
    theta_g (if given) is [H, N, N] and only valid for self-attention.
    Appends each head's weights to `weights_out` when provided.
    """
    if theta_g is not None:
        expected = (params.heads, x_q.shape[0], x_kv.shape[0])
        if x_q.shape[0] != x_kv.shape[0] or theta_g.shape != expected:
            raise DimensionError(f"geometric gate {theta_g.shape} needs shape {expected} with N_q == N_k")

    heads = []
    for h in range(params.heads):
        q = matmul(x_q, params.w_q[h])
        k = matmul(x_kv, params.w_k[h])
        v = matmul(x_kv, params.w_v[h])
        gate = select(theta_g, h) if theta_g is not None else None
        theta = gated_attention_weights(scaled_logits(q, k), gate, mask, eps_g)
        if weights_out is not None:
            weights_out.append(theta.numpy())
        theta = dropout(theta, dropout_rate, rng)
        heads.append(matmul(theta, v))
    return matmul(concat(heads, axis=-1), params.w_o)


def attention_weights(x_q: Tensor, x_kv: Tensor, params: HeadParams,
                      theta_g: Optional[Tensor] = None, mask=None,
                      eps_g: float = 1e-6) -> AttentionWeights:
    """Stacked per-head weights, for inspection."""
    collected: List[np.ndarray] = []
    multi_head_attention(x_q, x_kv, params, theta_g, mask, eps_g, weights_out=collected)
    return AttentionWeights(theta=np.stack(collected))


def causal_mask(length: int) -> np.ndarray:
    """Boolean [length, length]; (i, j) allowed iff j <= i."""
    if length < 1:
        raise DimensionError(f"causal mask length must be >= 1, got {length}")
    return np.tril(np.ones((length, length), dtype=bool))

"""Masked multi-head scaled dot-product attention."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn


@dataclass
class AttentionConfig:
    d_model: int = 128
    heads: int = 4
    use_residual_norm: bool = True
    depth: int = 1

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class MultiHeadAttention(nn.Module):
    """Queries attend over keys/values; masked keys get exactly zero weight.

    With ``use_residual_norm`` the query input is added back and the sum is
    layer-normalized.
    """

    def __init__(self, d_model: int, heads: int, use_residual_norm: bool = True):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        self.d_model = d_model
        self.heads = heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.norm = nn.LayerNorm(d_model) if use_residual_norm else None

    def _split(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.d_model // self.heads).transpose(1, 2)

    def forward(self, queries, keys_values, mask: Optional[torch.Tensor] = None
                ) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Args:
            queries: (B, Lq, d)
            keys_values: (B, Lkv, d)
            mask: (B, Lkv) bool, True marks a real key. None means all real.

        Returns:
            output (B, Lq, d) and attention weights (B, heads, Lq, Lkv).
        """
        q, k, v = self._split(self.q(queries)), self._split(self.k(keys_values)), self._split(self.v(keys_values))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_model // self.heads)
        if mask is not None:
            mask = torch.as_tensor(mask, dtype=torch.bool)
            if not bool(mask.any(dim=-1).all()):
                raise ValueError("attention mask has a row with no real keys")
            scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        b, _, lq, _ = weights.shape
        out = (weights @ v).transpose(1, 2).reshape(b, lq, self.d_model)
        out = self.o(out)
        if self.norm is not None:
            out = self.norm(out + queries)
        return out, weights


def cross_attention(queries, keys_values, mask, module: MultiHeadAttention):
    """Unbatched convenience wrapper: (Lq, d), (Lkv, d), (Lkv,) -> (Lq, d), weights (H, Lq, Lkv)."""
    dtype = next(module.parameters()).dtype
    q = torch.as_tensor(queries, dtype=dtype).unsqueeze(0)
    kv = torch.as_tensor(keys_values, dtype=dtype).unsqueeze(0)
    m = None if mask is None else torch.as_tensor(mask, dtype=torch.bool).unsqueeze(0)
    out, w = module(q, kv, m)
    return out[0], w[0]

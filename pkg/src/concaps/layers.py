"""Small transformer building blocks shared by the text encoder and decoder."""

from __future__ import annotations

import math

import torch
from torch import nn


def sinusoidal_positions(length: int, dim: int, *, dtype=torch.float32, device=None) -> torch.Tensor:
    """Classic fixed sin/cos position table, shape [length, dim]."""
    position = torch.arange(length, dtype=dtype, device=device).unsqueeze(1)
    half = torch.arange(0, dim, 2, dtype=dtype, device=device)
    freq = torch.exp(-math.log(10000.0) * half / dim)
    table = torch.zeros(length, dim, dtype=dtype, device=device)
    table[:, 0::2] = torch.sin(position * freq)
    table[:, 1::2] = torch.cos(position * freq[: dim // 2])
    return table


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate query/key/value projections.

    Masks use the convention True = blocked. ``attn_mask`` is [Tq, Tk] and
    shared across the batch; ``key_padding_mask`` is [B, Tk].
    """

    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(
        self,
        query: torch.Tensor,  # [B, Tq, D]
        keys: torch.Tensor,  # [B, Tk, D]
        attn_mask: torch.Tensor | None = None,
        key_padding_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        bsz, t_q, d_model = query.shape
        t_k = keys.shape[1]
        q = self.q_proj(query).view(bsz, t_q, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k_proj(keys).view(bsz, t_k, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v_proj(keys).view(bsz, t_k, self.n_heads, self.d_head).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)  # [B, H, Tq, Tk]
        if attn_mask is not None:
            scores = scores.masked_fill(attn_mask.view(1, 1, t_q, t_k), float("-inf"))
        if key_padding_mask is not None:
            scores = scores.masked_fill(
                key_padding_mask.view(bsz, 1, 1, t_k), float("-inf")
            )
        attn = torch.softmax(scores, dim=-1)
        attn = self.dropout(attn)
        out = (attn @ v).transpose(1, 2).reshape(bsz, t_q, d_model)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float = 0.0):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_model, d_ff),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(d_ff, d_model),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def causal_mask(length: int, device=None) -> torch.Tensor:
    """Boolean [T, T] mask blocking attention to positions after the query."""
    return torch.triu(torch.ones(length, length, dtype=torch.bool, device=device), 1)

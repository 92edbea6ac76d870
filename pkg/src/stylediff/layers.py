"""Building blocks shared by the text, phoneme and mel networks."""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn


def sinusoidal_table(n_positions: int, dim: int) -> torch.Tensor:
    """Standard transformer position table, shape ``(n_positions, dim)``."""
    position = torch.arange(n_positions, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(n_positions, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div)[:, : dim // 2]
    return table.float()


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer diffusion steps, shape ``(batch, dim)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None, :] * 100.0
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def lengths_to_mask(lengths: torch.Tensor, max_len: Optional[int] = None) -> torch.Tensor:
    """Boolean mask, True at valid positions."""
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


class BinEmbedding(nn.Module):
    """Embedding of quantization bins with parameters shared across bins.

    Each bin index gets a fixed sinusoidal code (wavelengths from 4 bins to
    twice the bin count). A learned linear map turns the code into the
    embedding. Neighbouring bins therefore get nearby vectors, and a bin that
    no training value fell into still gets a sensible one.
    """

    def __init__(self, n_bins: int, dim: int, code_dim: int = 64):
        super().__init__()
        half = code_dim // 2
        wavelengths = torch.logspace(math.log10(4.0), math.log10(2.0 * n_bins), half,
                                     dtype=torch.float64)
        angle = 2 * math.pi * torch.arange(n_bins, dtype=torch.float64)[:, None] / wavelengths
        self.register_buffer("code", torch.cat([angle.sin(), angle.cos()], dim=-1).float(),
                             persistent=False)
        self.proj = nn.Linear(2 * half, dim)

    @property
    def n_bins(self) -> int:
        return self.code.shape[0]

    def forward(self, index: torch.Tensor) -> torch.Tensor:
        return self.proj(self.code.to(self.proj.weight.dtype)[index])


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, hidden: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        if hidden % n_heads:
            raise ValueError(f"hidden size {hidden} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = hidden // n_heads
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.out = nn.Linear(hidden, hidden)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None,
                fixed_weights: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Self-attention over ``x`` of shape ``(batch, length, hidden)``.

        ``mask`` marks valid key positions. ``fixed_weights`` replaces the
        computed attention map (used to probe the block with a known map).
        """
        b, n, _ = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        if fixed_weights is None:
            scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
            if mask is not None:
                scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
            weights = self.dropout(scores.softmax(dim=-1))
        else:
            weights = fixed_weights.to(x.dtype).expand(b, self.n_heads, n, n)
        y = (weights @ v).transpose(1, 2).reshape(b, n, -1)
        return self.out(y)

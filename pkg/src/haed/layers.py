"""Shared transformer building blocks.

Hand-rolled (rather than torch.nn.MultiheadAttention) so that dropout is
driven by an explicit torch.Generator and initialization by a seeded
walk over parameter names; both are needed for bit-reproducible runs.
GELU throughout keeps every op smooth for finite-difference checks.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

NEG_INF = float("-inf")


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    idx = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, idx / dim)
    enc = torch.zeros(length, dim, dtype=torch.float64)
    enc[:, 0::2] = torch.sin(angle)
    enc[:, 1::2] = torch.cos(angle[:, : dim - dim // 2])
    return enc.to(dtype)


def seeded_dropout(
    x: torch.Tensor, p: float, train: bool, generator: torch.Generator | None
) -> torch.Tensor:
    if not train or p <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= p)
    return x * keep / (1.0 - p)


def init_module(module: nn.Module, seed: int) -> None:
    """Deterministic init: xavier-normal weights, zero biases, unit norms.

    Walks parameters sorted by name so the draw order never depends on
    registration order. Parameters whose name ends in `zero_init_suffixes`
    are zeroed (used for output heads that must start uniform).
    """
    gen = torch.Generator().manual_seed(seed)
    zero_suffixes = getattr(module, "zero_init_suffixes", ())
    for name, param in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if any(name.endswith(sfx) for sfx in zero_suffixes):
                param.zero_()
            elif param.dim() >= 2:
                fan_out, fan_in = param.shape[0], param.shape[1]
                std = math.sqrt(2.0 / (fan_in + fan_out))
                vals = torch.randn(param.shape, generator=gen, dtype=torch.float64)
                param.copy_((vals * std).to(param.dtype))
            elif "norm" in name and name.endswith(".weight"):
                param.fill_(1.0)
            else:
                param.zero_()


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, dtype=torch.float32):
        super().__init__()
        self.up = nn.Linear(dim, hidden, dtype=dtype)
        self.down = nn.Linear(hidden, dim, dtype=dtype)

    def forward(self, x):
        return self.down(F.gelu(self.up(x)))


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dtype=torch.float32):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim, dtype=dtype)
        self.out = nn.Linear(dim, dim, dtype=dtype)

    def forward(self, x, valid_mask=None, causal=False):
        """x: (B, T, D); valid_mask: (B, T) bool, True where real frames."""
        B, T, D = x.shape
        q, k, v = self.qkv(x).split(D, dim=-1)

        def heads(t):
            return t.view(B, T, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = heads(q), heads(k), heads(v)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if valid_mask is not None:
            scores = scores.masked_fill(~valid_mask[:, None, None, :], NEG_INF)
        if causal:
            tri = torch.ones(T, T, dtype=torch.bool, device=x.device).tril()
            scores = scores.masked_fill(~tri, NEG_INF)
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(B, T, D)
        return self.out(ctx)


class SelfAttentionLayer(nn.Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, dim: int, heads: int, hidden: int, dropout: float, dtype=torch.float32):
        super().__init__()
        self.attn_norm = nn.LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadSelfAttention(dim, heads, dtype=dtype)
        self.ff_norm = nn.LayerNorm(dim, dtype=dtype)
        self.ff = FeedForward(dim, hidden, dtype=dtype)
        self.dropout = dropout

    def forward(self, x, valid_mask=None, causal=False, train=False, generator=None):
        a = self.attn(self.attn_norm(x), valid_mask=valid_mask, causal=causal)
        x = x + seeded_dropout(a, self.dropout, train, generator)
        f = self.ff(self.ff_norm(x))
        return x + seeded_dropout(f, self.dropout, train, generator)

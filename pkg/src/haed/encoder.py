"""Acoustic encoder: strided frame stacking + transformer self-attention.

The encoder sees features and parameters only; no token information can
reach this path, which is the structural guarantee the factorized decoder
relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .layers import SelfAttentionLayer, init_module, seeded_dropout, sinusoidal_positions


class EncoderError(ValueError):
    pass


@dataclass
class EncoderConfig:
    layers: int = 2
    model_dim: int = 64
    heads: int = 4
    feedforward_dim: int = 128
    subsampling_factor: int = 4
    dropout: float = 0.1

    def validate(self) -> None:
        if self.model_dim % self.heads != 0:
            raise EncoderError("model_dim must be divisible by heads")
        if self.subsampling_factor < 1:
            raise EncoderError("subsampling_factor must be >= 1")


def subsampled_length(t: int, factor: int) -> int:
    return math.ceil(t / factor)


class Encoder(nn.Module):
    def __init__(self, feature_dim: int, config: EncoderConfig, dtype=torch.float32):
        super().__init__()
        config.validate()
        self.feature_dim = feature_dim
        self.config = config
        k = config.subsampling_factor
        self.subsample = nn.Linear(feature_dim * k, config.model_dim, dtype=dtype)
        self.layers = nn.ModuleList(
            SelfAttentionLayer(
                config.model_dim, config.heads, config.feedforward_dim, config.dropout, dtype
            )
            for _ in range(config.layers)
        )
        self.final_norm = nn.LayerNorm(config.model_dim, dtype=dtype)
        self.dtype_ = dtype

    def init_parameters(self, seed: int) -> None:
        init_module(self, seed)

    def forward(self, feats: torch.Tensor, lengths, train: bool = False, generator=None):
        """(B, T, F) features -> (B, T', D) states plus valid T' lengths."""
        if feats.dim() != 3:
            raise EncoderError(f"features must be (B, T, F), got {tuple(feats.shape)}")
        if feats.shape[-1] != self.feature_dim:
            raise EncoderError(
                f"feature dim {feats.shape[-1]} != configured {self.feature_dim}"
            )
        if not torch.isfinite(feats).all():
            raise EncoderError("non-finite feature values")
        lengths = torch.as_tensor(lengths, dtype=torch.long, device=feats.device)
        k = self.config.subsampling_factor
        if int(lengths.min()) < k:
            raise EncoderError(f"need at least {k} frames per utterance")

        B, T, Fdim = feats.shape
        pad = (-T) % k
        if pad:
            feats = torch.cat(
                [feats, torch.zeros(B, pad, Fdim, dtype=feats.dtype, device=feats.device)],
                dim=1,
            )
        stacked = feats.reshape(B, (T + pad) // k, k * Fdim)
        x = self.subsample(stacked)
        out_lengths = torch.div(lengths + k - 1, k, rounding_mode="floor")
        pos = sinusoidal_positions(x.shape[1], x.shape[2], dtype=x.dtype).to(x.device)
        x = x + pos
        x = seeded_dropout(x, self.config.dropout, train, generator)
        valid = torch.arange(x.shape[1], device=x.device)[None, :] < out_lengths[:, None]
        for layer in self.layers:
            x = layer(x, valid_mask=valid, train=train, generator=generator)
        x = self.final_norm(x)
        return x, out_lengths

    def encode_single(self, feats: torch.Tensor):
        """Convenience for one utterance: (T, F) -> (T', D)."""
        h, n = self.forward(feats.unsqueeze(0), [feats.shape[0]])
        return h[0, : int(n[0])]

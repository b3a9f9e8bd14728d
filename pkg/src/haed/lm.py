"""Decoder language model: causal self-attention over previous tokens only.

This is one half of the factorized decoder. It never sees acoustics, so
it doubles as a standalone LM that text-only adaptation can fine-tune.
Any object exposing `next_log_probs(prefix_ids)` over the same vocabulary
can stand in for it at decode time (see ngram.NGramDecoderAdapter).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .layers import SelfAttentionLayer, init_module, seeded_dropout, sinusoidal_positions


class LMError(ValueError):
    pass


@dataclass
class LMConfig:
    layers: int = 2
    model_dim: int = 64
    heads: int = 4
    feedforward_dim: int = 128
    tie_embeddings: bool = False
    dropout: float = 0.1

    def validate(self) -> None:
        if self.model_dim % self.heads != 0:
            raise LMError("model_dim must be divisible by heads")


@dataclass
class LMOutput:
    log_probs: torch.Tensor  # (B, U, V), row u conditions on tokens 0..u-1
    hidden: torch.Tensor  # (B, U, D) pre-head states, kept for adaptation


class DecoderLM(nn.Module):
    # head starts at zero so an untrained model is exactly uniform
    zero_init_suffixes = ("head.weight", "head.bias")

    def __init__(self, vocab_size: int, sos_id: int, config: LMConfig, dtype=torch.float32):
        super().__init__()
        config.validate()
        self.vocab_size = vocab_size
        self.sos_id = sos_id
        self.config = config
        self.embed = nn.Embedding(vocab_size, config.model_dim, dtype=dtype)
        self.layers = nn.ModuleList(
            SelfAttentionLayer(
                config.model_dim, config.heads, config.feedforward_dim, config.dropout, dtype
            )
            for _ in range(config.layers)
        )
        self.final_norm = nn.LayerNorm(config.model_dim, dtype=dtype)
        self.head = nn.Linear(config.model_dim, vocab_size, dtype=dtype)
        if config.tie_embeddings:
            self.head.weight = self.embed.weight

    def init_parameters(self, seed: int) -> None:
        init_module(self, seed)
        if self.config.tie_embeddings:
            self.head.weight = self.embed.weight

    def forward(self, tokens: torch.Tensor, lengths=None, train: bool = False, generator=None) -> LMOutput:
        """sos-prefixed (B, U) ids -> causal next-token log-probs (B, U, V)."""
        if tokens.dim() != 2 or tokens.shape[1] < 1:
            raise LMError("tokens must be a non-empty (B, U) batch")
        if (tokens[:, 0] != self.sos_id).any():
            raise LMError("every sequence must start with sos")
        B, U = tokens.shape
        x = self.embed(tokens) * math.sqrt(self.config.model_dim)
        x = x + sinusoidal_positions(U, self.config.model_dim, dtype=x.dtype).to(x.device)
        x = seeded_dropout(x, self.config.dropout, train, generator)
        valid = None
        if lengths is not None:
            lengths = torch.as_tensor(lengths, dtype=torch.long, device=tokens.device)
            valid = torch.arange(U, device=tokens.device)[None, :] < lengths[:, None]
        for layer in self.layers:
            x = layer(x, valid_mask=valid, causal=True, train=train, generator=generator)
        hidden = self.final_norm(x)
        log_probs = torch.log_softmax(self.head(hidden), dim=-1)
        return LMOutput(log_probs=log_probs, hidden=hidden)

    @torch.no_grad()
    def next_log_probs(self, prefix_ids: list[int]) -> np.ndarray:
        """Next-token distribution after `prefix_ids` (no sos), as (V,) float64."""
        tokens = torch.tensor([[self.sos_id] + list(prefix_ids)], dtype=torch.long)
        out = self.forward(tokens)
        return out.log_probs[0, -1].double().numpy()


def lm_forward(model: DecoderLM, tokens: list[int]) -> LMOutput:
    """Single-sequence forward; `tokens` must begin with sos."""
    if not tokens:
        raise LMError("empty input")
    return model(torch.tensor([tokens], dtype=torch.long))


def lm_nll(model: DecoderLM, tokens: list[int]) -> torch.Tensor:
    """Total -log p of `tokens` (which should end with eos) under the LM."""
    if not tokens:
        raise LMError("empty target sequence")
    inp = torch.tensor([[model.sos_id] + list(tokens[:-1])], dtype=torch.long)
    out = model(inp)
    tgt = torch.tensor(tokens, dtype=torch.long)
    picked = out.log_probs[0, torch.arange(len(tokens)), tgt]
    return -picked.sum()


def lm_perplexity(model: DecoderLM, sequences: list[list[int]], eos_id: int) -> float:
    """exp(total nll / total predicted tokens); eos is predicted and counted."""
    if not sequences:
        raise LMError("empty corpus")
    total_nll = 0.0
    total_tokens = 0
    with torch.no_grad():
        for seq in sequences:
            target = list(seq) + [eos_id]
            total_nll += float(lm_nll(model, target))
            total_tokens += len(target)
    return math.exp(total_nll / total_tokens)

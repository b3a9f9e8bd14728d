"""Acoustic decoder branch: cross-attention from alignment-indexed queries.

Step u's query is the encoder state at the previous label's emission
frame, so the only way tokens influence this branch is through those
frame indices. There is no self-attention across steps and no token
embedding: rows are computed independently and are invariant to token
identity given the alignment.

Attention uses a single softmax per step over encoder frames with
unprojected values, i.e. the context is a literal convex combination of
encoder states; with a one-frame mask the context *is* that frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .layers import NEG_INF, FeedForward, init_module, seeded_dropout, sinusoidal_positions


class AcousticError(ValueError):
    pass


@dataclass
class AcousticConfig:
    layers: int = 2
    model_dim: int = 64
    feedforward_dim: int = 128
    dropout: float = 0.1


@dataclass
class AcousticScores:
    scores: torch.Tensor  # (B, U, V) vocabulary logits per step
    attention: list[torch.Tensor]  # per layer, (B, U, T') weights over kept frames
    contexts: list[torch.Tensor]  # per layer, (B, U, D) convex combinations of h


def gather_queries(h: torch.Tensor, frames, sos_frame: int = 0) -> torch.Tensor:
    """Queries for U+1 decoder steps: h[sos_frame], then h[t] per label frame.

    `h` is (T', D) for one utterance; `frames` are the label emission
    frames (the step-u query uses the frame of label u-1).
    """
    if h.dim() != 2:
        raise AcousticError("h must be (T', D)")
    t_max = h.shape[0]
    idx = [sos_frame] + [int(f) for f in frames]
    for f in idx:
        if not 0 <= f < t_max:
            raise AcousticError(f"query frame {f} outside [0, {t_max})")
    return h[torch.tensor(idx, dtype=torch.long, device=h.device)]


class CrossAttentionLayer(nn.Module):
    def __init__(self, dim: int, hidden: int, dropout: float, dtype=torch.float32):
        super().__init__()
        self.query_norm = nn.LayerNorm(dim, dtype=dtype)
        self.query_proj = nn.Linear(dim, dim, dtype=dtype)
        # no key bias: softmax is invariant to a per-query constant shift
        self.key_proj = nn.Linear(dim, dim, bias=False, dtype=dtype)
        self.ff_norm = nn.LayerNorm(dim, dtype=dtype)
        self.ff = FeedForward(dim, hidden, dtype=dtype)
        self.dropout = dropout
        self.dim = dim

    def forward(self, x, h, keys, frame_mask, train=False, generator=None):
        """x: (B, U, D) step stream; h/keys: (B, T, D); frame_mask: (B, T)
        bool. Attention scores use `keys` (position-tagged encoder states);
        the context is a convex combination of the raw states `h`."""
        q = self.query_proj(self.query_norm(x))
        k = self.key_proj(keys)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.dim)
        scores = scores.masked_fill(~frame_mask[:, None, :], NEG_INF)
        attn = torch.softmax(scores, dim=-1)  # (B, U, T)
        ctx = attn @ h  # convex combination of raw encoder states
        x = x + seeded_dropout(ctx, self.dropout, train, generator)
        x = x + seeded_dropout(self.ff(self.ff_norm(x)), self.dropout, train, generator)
        return x, attn, ctx


class AcousticBranch(nn.Module):
    def __init__(self, vocab_size: int, config: AcousticConfig, dtype=torch.float32):
        super().__init__()
        self.vocab_size = vocab_size
        self.config = config
        self.layers = nn.ModuleList(
            CrossAttentionLayer(config.model_dim, config.feedforward_dim, config.dropout, dtype)
            for _ in range(config.layers)
        )
        self.final_norm = nn.LayerNorm(config.model_dim, dtype=dtype)
        self.head = nn.Linear(config.model_dim, vocab_size, dtype=dtype)

    def init_parameters(self, seed: int) -> None:
        init_module(self, seed)

    def forward(
        self,
        queries: torch.Tensor,
        h: torch.Tensor,
        frame_mask: torch.Tensor | None = None,
        query_frames: torch.Tensor | None = None,
        train: bool = False,
        generator=None,
    ) -> AcousticScores:
        """(B, U, D) queries + (B, T, D) states -> (B, U, V) logits.

        `query_frames` (B, U) are the indices the queries were gathered at;
        when given, queries and keys are tagged with sinusoidal positions so
        the branch can address frames relative to the query. The branch's
        inputs remain (h, frame index) only: no token identity enters.
        """
        if queries.dim() != 3 or h.dim() != 3:
            raise AcousticError("queries and h must be 3-d batches")
        B, T, _ = h.shape
        if frame_mask is None:
            frame_mask = torch.ones(B, T, dtype=torch.bool, device=h.device)
        if not frame_mask.any(dim=1).all():
            raise AcousticError("at least one frame must survive pruning")
        pos = sinusoidal_positions(T, h.shape[-1], dtype=h.dtype).to(h.device)
        keys = h + pos
        x = queries
        if query_frames is not None:
            x = x + pos[query_frames]
        weights, contexts = [], []
        for layer in self.layers:
            x, attn, ctx = layer(x, h, keys, frame_mask, train=train, generator=generator)
            weights.append(attn)
            contexts.append(ctx)
        scores = self.head(self.final_norm(x))
        return AcousticScores(scores=scores, attention=weights, contexts=contexts)

    def score_single(
        self, queries: torch.Tensor, h: torch.Tensor, kept_frames=None, query_frames=None
    ) -> AcousticScores:
        """One utterance: (U, D) queries, (T', D) states, optional kept frame ids."""
        mask = None
        if kept_frames is not None:
            mask = torch.zeros(1, h.shape[0], dtype=torch.bool, device=h.device)
            mask[0, torch.as_tensor(list(kept_frames), dtype=torch.long)] = True
        qf = None
        if query_frames is not None:
            qf = torch.as_tensor(query_frames, dtype=torch.long).unsqueeze(0)
        out = self.forward(queries.unsqueeze(0), h.unsqueeze(0), mask, query_frames=qf)
        return AcousticScores(
            scores=out.scores[0],
            attention=[w[0] for w in out.attention],
            contexts=[c[0] for c in out.contexts],
        )

"""Manifest-backed utterance loading and deterministic batching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .corpus import ManifestRecord, read_features, read_manifest


@dataclass
class Utterance:
    id: str
    features: np.ndarray | None  # (T, F) float32, None for text-only records
    tokens: list[int]
    domain: str
    spans: list[list[int]] | None = None


def load_utterances(manifest_path: str, with_features: bool = True) -> list[Utterance]:
    utts = []
    for rec in read_manifest(manifest_path):
        feats = read_features(rec.path) if (with_features and rec.path) else None
        utts.append(Utterance(rec.id, feats, list(rec.tokens), rec.domain, rec.spans))
    return utts


@dataclass
class Batch:
    features: torch.Tensor  # (B, T_max, F)
    feat_lengths: torch.Tensor
    tokens: torch.Tensor  # (B, U_max) zero-padded
    token_lengths: torch.Tensor
    ids: list[str]
    domains: list[str]


def make_batch(utts: list[Utterance], dtype=torch.float32) -> Batch:
    if not utts:
        raise ValueError("empty batch")
    t_max = max(u.features.shape[0] for u in utts)
    u_max = max(len(u.tokens) for u in utts)
    fdim = utts[0].features.shape[1]
    feats = torch.zeros(len(utts), t_max, fdim, dtype=dtype)
    tokens = torch.zeros(len(utts), u_max, dtype=torch.long)
    flens = torch.zeros(len(utts), dtype=torch.long)
    tlens = torch.zeros(len(utts), dtype=torch.long)
    for i, u in enumerate(utts):
        t = u.features.shape[0]
        feats[i, :t] = torch.from_numpy(np.ascontiguousarray(u.features)).to(dtype)
        flens[i] = t
        tokens[i, : len(u.tokens)] = torch.tensor(u.tokens, dtype=torch.long)
        tlens[i] = len(u.tokens)
    return Batch(feats, flens, tokens, tlens, [u.id for u in utts], [u.domain for u in utts])


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """Batch order for an epoch as a pure function of (seed, epoch)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB5, epoch]))
    return rng.permutation(n)


def batches_for_step_range(
    utts: list[Utterance],
    batch_size: int,
    seed: int,
    first_step: int,
    last_step: int,
):
    """Yield (step, Batch) for steps in [first_step, last_step).

    Step s draws a deterministic slice of epoch s // steps_per_epoch, so a
    resumed run regenerates exactly the batches an uninterrupted run sees.
    """
    n = len(utts)
    steps_per_epoch = max(1, (n + batch_size - 1) // batch_size)
    perm_cache: dict[int, np.ndarray] = {}
    for step in range(first_step, last_step):
        epoch = step // steps_per_epoch
        pos = step % steps_per_epoch
        if epoch not in perm_cache:
            perm_cache.clear()
            perm_cache[epoch] = epoch_permutation(n, seed, epoch)
        idx = perm_cache[epoch][pos * batch_size : (pos + 1) * batch_size]
        yield step, make_batch([utts[i] for i in idx])
